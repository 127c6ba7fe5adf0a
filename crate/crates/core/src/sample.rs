//! Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`, then rounding.
//!
//! ```text
//! for t = T..1:
//!     x0_hat  = f(x_t, t, I_di)
//!     x_{t-1} = mu(x_t, t, x0_hat) + sqrt(Sigma(t)) * eps_t    (t > 1)
//!     x_0     = mu(x_1, 1, x0_hat)                              (t = 1)
//! ```
//!
//! [`NoiseMode::StrictLiteral`] replaces `sqrt(Sigma(t))` with `Sigma(t)`
//! for side-by-side comparison; it does not sample from `N(mu, Sigma)`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::denoiser::{self, DenoiserConfig};
use crate::error::{Error, Result};
use crate::model::rounding_params;
use crate::params::ParamStore;
use crate::schedule::NoiseSchedule;
use crate::textspace::{round_to_tokens, Vocabulary, EMBEDDING};
use crate::train::gaussian;
use crate::vision::{Backbone, Image};

/// Latents with any entry at or beyond this magnitude abort sampling.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// `x_{t-1} = mu + sqrt(Sigma) eps`.
    #[default]
    Ancestral,
    /// `x_{t-1} = mu + Sigma eps`.
    StrictLiteral,
    /// `x_{t-1} = mu`; a deterministic map of `(I_di, x_T)`.
    Off,
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(NoiseMode::Ancestral),
            "strict" | "strict_literal" => Ok(NoiseMode::StrictLiteral),
            "off" | "none" => Ok(NoiseMode::Off),
            other => Err(Error::Config(format!("unknown noise mode `{other}`"))),
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Ancestral => "ancestral",
            NoiseMode::StrictLiteral => "strict_literal",
            NoiseMode::Off => "off",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleOptions {
    pub noise: NoiseMode,
    /// Snap every `x0_hat` row to the nearest embedding row.
    pub clamp: bool,
    /// Record per-step latent norms.
    pub trace: bool,
}

/// Latent statistics after producing `x_{t-1}` at step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub l2: f64,
    pub max_abs: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("t,l2,max_abs\n");
    for r in rows {
        s.push_str(&format!("{},{:e},{:e}\n", r.t, r.l2, r.max_abs));
    }
    s
}

/// Anything that predicts `x_0` from `(x_t, t, I_di)`.
pub trait X0Predictor {
    fn predict(&self, x_t: &Array2<f64>, t: usize, idi: &Array2<f64>) -> Result<Array2<f64>>;
}

/// The trained denoiser with dropout off.
pub struct TrainedDenoiser<'a> {
    pub cfg: &'a DenoiserConfig,
    pub params: &'a ParamStore,
}

impl X0Predictor for TrainedDenoiser<'_> {
    fn predict(&self, x_t: &Array2<f64>, t: usize, idi: &Array2<f64>) -> Result<Array2<f64>> {
        denoiser::denoise(x_t, t, idi, self.cfg, self.params)
    }
}

/// Replace each row by the nearest row of `table` (Euclidean, ties to the
/// lowest index).
pub fn snap_to_rows(x: &Array2<f64>, table: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for (mut row, src) in out.rows_mut().into_iter().zip(x.rows()) {
        let mut best = (0, f64::INFINITY);
        for (i, cand) in table.rows().into_iter().enumerate() {
            let d: f64 = cand
                .iter()
                .zip(src.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        row.assign(&table.row(best.0));
    }
    out
}

/// Run the reverse chain from `x_T`. `clamp_table` enables snapping.
#[allow(clippy::too_many_arguments)]
pub fn reverse_chain(
    predictor: &dyn X0Predictor,
    idi: &Array2<f64>,
    x_start: Array2<f64>,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    noise: NoiseMode,
    clamp_table: Option<&Array2<f64>>,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Array2<f64>> {
    let (n, d) = x_start.dim();
    let mut x = x_start;
    for t in (1..=sched.steps()).rev() {
        let mut x0_hat = predictor.predict(&x, t, idi)?;
        if let Some(table) = clamp_table {
            x0_hat = snap_to_rows(&x0_hat, table);
        }
        let mut next = denoiser::reverse_mean(&x, t, &x0_hat, sched)?;
        if t > 1 && noise != NoiseMode::Off {
            let var = sched.posterior_variance(t)?;
            let scale = match noise {
                NoiseMode::Ancestral => var.sqrt(),
                _ => var,
            };
            next.scaled_add(scale, &gaussian(rng, n, d));
        }
        let max_abs = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !max_abs.is_finite() || max_abs >= DIVERGENCE_LIMIT {
            return Err(Error::SamplerDiverged { t });
        }
        if let Some(rows) = trace.as_deref_mut() {
            let l2 = next.iter().map(|v| v * v).sum::<f64>().sqrt();
            rows.push(TraceRow { t, l2, max_abs });
        }
        x = next;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub ids: Vec<usize>,
    pub caption: String,
    pub trace: Option<Vec<TraceRow>>,
}

/// Everything the sampler needs besides the images and the rng.
pub struct Sampler<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a DenoiserConfig,
    pub sched: &'a NoiseSchedule,
    pub vocab: &'a Vocabulary,
    pub backbone: &'a Backbone,
    pub options: SampleOptions,
}

impl Sampler<'_> {
    fn check(&self) -> Result<()> {
        self.cfg.validate()?;
        let table = self.params.get(EMBEDDING)?;
        if table.dim() != (self.vocab.len(), self.cfg.word_dim) {
            return Err(Error::shape(
                "sampler embedding table",
                &[self.vocab.len(), self.cfg.word_dim],
                table.shape(),
            ));
        }
        Ok(())
    }

    /// Sample from a precomputed residual map.
    pub fn sample_residual(&self, idi: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<SampleOutput> {
        self.check()?;
        let predictor = TrainedDenoiser {
            cfg: self.cfg,
            params: self.params,
        };
        let x_start = gaussian(rng, self.cfg.seq_len, self.cfg.word_dim);
        let table = self.params.get(EMBEDDING)?;
        let mut trace = self.options.trace.then(Vec::new);
        let x0 = reverse_chain(
            &predictor,
            idi,
            x_start,
            self.sched,
            rng,
            self.options.noise,
            self.options.clamp.then_some(table),
            trace.as_mut(),
        )?;
        let (w, b) = rounding_params(self.params)?;
        let ids = round_to_tokens(&x0, &w, b)?.ids;
        let caption = self.vocab.decode(&ids).join(" ");
        Ok(SampleOutput {
            ids,
            caption,
            trace,
        })
    }

    /// Residual map of the pair, then [`Sampler::sample_residual`].
    pub fn sample_caption(
        &self,
        before: &Image,
        after: &Image,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleOutput> {
        let idi = self.backbone.residual(before, after, self.params)?;
        self.sample_residual(&idi.tokens, rng)
    }

    /// One caption per pair; item `i` uses the stream keyed by its id, so
    /// each output depends only on its own input.
    pub fn batch_sample(
        &self,
        pairs: &[(&str, &Image, &Image)],
        seed: u64,
    ) -> Result<Vec<SampleOutput>> {
        pairs
            .iter()
            .map(|(id, before, after)| self.sample_caption(before, after, &mut item_rng(seed, id)))
            .collect()
    }
}

/// Independent stream for item `id` under run seed `seed`.
pub fn item_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, BackboneKind};
    use crate::schedule::ScheduleSpec;
    use crate::textspace::embed;
    use ndarray::Array3;
    use rand::Rng;

    struct Fixed(Array2<f64>);

    impl X0Predictor for Fixed {
        fn predict(&self, _: &Array2<f64>, _: usize, _: &Array2<f64>) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn noiseless_chain_reaches_the_fixed_prediction() {
        let sched = ScheduleSpec::sqrt(50).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let target = gaussian(&mut rng, 4, 3);
        let start = gaussian(&mut rng, 4, 3) * 5.0;
        let mut trace = Vec::new();
        let x0 = reverse_chain(
            &Fixed(target.clone()),
            &Array2::zeros((1, 1)),
            start,
            &sched,
            &mut rng,
            NoiseMode::Off,
            None,
            Some(&mut trace),
        )
        .unwrap();
        assert_eq!(x0, target);
        assert_eq!(trace.len(), 50);
        assert_eq!(trace.first().unwrap().t, 50);
        assert_eq!(trace.last().unwrap().t, 1);
        assert!(trace_csv(&trace).starts_with("t,l2,max_abs\n50,"));
    }

    #[test]
    fn noise_modes_differ_only_in_scale() {
        let sched = ScheduleSpec::sqrt(20).build().unwrap();
        let target = Array2::from_elem((2, 2), 0.5);
        let run = |mode| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let start = gaussian(&mut rng, 2, 2);
            let mut tr = Vec::new();
            reverse_chain(
                &Fixed(target.clone()),
                &Array2::zeros((1, 1)),
                start,
                &sched,
                &mut rng,
                mode,
                None,
                Some(&mut tr),
            )
            .unwrap();
            tr
        };
        let a = run(NoiseMode::Ancestral);
        let s = run(NoiseMode::StrictLiteral);
        let o = run(NoiseMode::Off);
        assert_ne!(a, s);
        assert_ne!(a, o);
        // every step but the last adds noise; final outputs all equal target
        assert_eq!(a.last().unwrap().l2, o.last().unwrap().l2);
        assert_eq!(s.last().unwrap().l2, o.last().unwrap().l2);
        assert_eq!(
            "strict".parse::<NoiseMode>().unwrap(),
            NoiseMode::StrictLiteral
        );
        assert!("loud".parse::<NoiseMode>().is_err());
    }

    #[test]
    fn ancestral_step_has_posterior_variance() {
        // Single step from t = 2 with a fixed prediction: x_1 - mu ~ N(0, Sigma(2)).
        let sched = ScheduleSpec::linear_beta(2, 0.1, 0.3).build().unwrap();
        let sigma = sched.posterior_variance(2).unwrap();
        let trials = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let x_t = Array2::from_elem((1, 1), 0.7);
        let hat = Array2::from_elem((1, 1), -0.2);
        let mu = sched.posterior_mean(&x_t, &hat, 2).unwrap()[[0, 0]];
        for _ in 0..trials {
            let next = mu + sigma.sqrt() * gaussian(&mut rng, 1, 1)[[0, 0]];
            sum += next - mu;
            sumsq += (next - mu).powi(2);
        }
        let mean = sum / trials as f64;
        let var = sumsq / trials as f64;
        assert!(mean.abs() < 5.0 * (sigma / trials as f64).sqrt());
        assert!((var - sigma).abs() < 5.0 * sigma * (2.0 / trials as f64).sqrt());
    }

    #[test]
    fn divergence_is_detected() {
        let sched = ScheduleSpec::sqrt(10).build().unwrap();
        let huge = Array2::from_elem((1, 1), 5e3);
        let err = reverse_chain(
            &Fixed(huge),
            &Array2::zeros((1, 1)),
            Array2::zeros((1, 1)),
            &sched,
            &mut ChaCha8Rng::seed_from_u64(0),
            NoiseMode::Off,
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SamplerDiverged { .. }));
    }

    #[test]
    fn snapping_picks_nearest_rows() {
        let table = ndarray::array![[0.0, 0.0], [1.0, 1.0], [-1.0, 2.0]];
        let x = ndarray::array![[0.9, 0.8], [-0.4, 1.1], [0.1, -0.1]];
        assert_eq!(
            snap_to_rows(&x, &table),
            ndarray::array![[1.0, 1.0], [-1.0, 2.0], [0.0, 0.0]]
        );
    }

    #[test]
    fn oracle_prediction_recovers_the_caption() {
        // Fixed prediction = noised embedding of a known caption; rounding
        // is nearest-row via tied weights with bias -|e|^2 / 2.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = 12;
        let table = gaussian(&mut rng, v, 16);
        let w = table.t().to_owned();
        let b = Array2::from_shape_fn((1, v), |(_, j)| -0.5 * table.row(j).dot(&table.row(j)));
        let ids = vec![5, 7, 4, 2, 0, 0];
        let x0 = embed(&ids, &table).unwrap() + gaussian(&mut rng, 6, 16) * 0.1;
        let sched = ScheduleSpec::sqrt(30).build().unwrap();
        let out = reverse_chain(
            &Fixed(x0),
            &Array2::zeros((1, 1)),
            gaussian(&mut rng, 6, 16),
            &sched,
            &mut rng,
            NoiseMode::Ancestral,
            None,
            None,
        )
        .unwrap();
        assert_eq!(round_to_tokens(&out, &w, &b).unwrap().ids, ids);
    }

    fn toy_sampler_parts() -> (ParamStore, DenoiserConfig, NoiseSchedule, Vocabulary) {
        let vocab = Vocabulary::build(&[vec!["a", "road", "appears"]]).unwrap();
        let cfg = DenoiserConfig {
            d_model: 8,
            heads: 2,
            ssa_depth: 1,
            ffn_dim: 8,
            dropout: 0.1,
            seq_len: 4,
            image_tokens: 1,
            word_dim: 4,
            image_channels: 64,
            ..DenoiserConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = init_model(vocab.len(), &cfg, false, BackboneKind::Toy, &mut rng).unwrap();
        (p, cfg, ScheduleSpec::sqrt(8).build().unwrap(), vocab)
    }

    fn image(seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn((8, 8, 3), |_| r.gen::<f64>())).unwrap()
    }

    #[test]
    fn batch_streams_are_isolated_and_seeded() {
        let (p, cfg, sched, vocab) = toy_sampler_parts();
        let sampler = Sampler {
            params: &p,
            cfg: &cfg,
            sched: &sched,
            vocab: &vocab,
            backbone: &Backbone::Toy,
            options: SampleOptions {
                trace: true,
                ..SampleOptions::default()
            },
        };
        let imgs: Vec<Image> = (0..6).map(image).collect();
        let pairs = vec![
            ("p0", &imgs[0], &imgs[1]),
            ("p1", &imgs[2], &imgs[3]),
            ("p2", &imgs[4], &imgs[5]),
        ];
        let batch = sampler.batch_sample(&pairs, 9).unwrap();
        assert_eq!(batch, sampler.batch_sample(&pairs, 9).unwrap());
        for (i, (id, b, a)) in pairs.iter().enumerate() {
            let single = sampler.sample_caption(b, a, &mut item_rng(9, id)).unwrap();
            assert_eq!(single, batch[i]);
            assert_eq!(sampler.batch_sample(&pairs[i..=i], 9).unwrap()[0], single);
            assert_eq!(single.trace.as_ref().unwrap().len(), 8);
            assert_eq!(single.ids.len(), 4);
        }
        let mut rev = pairs.clone();
        rev.reverse();
        let rb = sampler.batch_sample(&rev, 9).unwrap();
        assert_eq!(rb[0], batch[2]);
        assert_eq!(rb[2], batch[0]);
        assert_ne!(
            item_rng(9, "p0").gen::<u64>(),
            item_rng(9, "p1").gen::<u64>()
        );
    }

    #[test]
    fn noiseless_sampler_is_a_function_of_start_and_condition() {
        let (p, cfg, sched, _) = toy_sampler_parts();
        let predictor = TrainedDenoiser {
            cfg: &cfg,
            params: &p,
        };
        let idi = Array2::from_elem((1, 64), 0.3);
        let start = gaussian(&mut ChaCha8Rng::seed_from_u64(1), 4, 4);
        let a = reverse_chain(
            &predictor,
            &idi,
            start.clone(),
            &sched,
            &mut ChaCha8Rng::seed_from_u64(2),
            NoiseMode::Off,
            None,
            None,
        )
        .unwrap();
        let b = reverse_chain(
            &predictor,
            &idi,
            start,
            &sched,
            &mut ChaCha8Rng::seed_from_u64(3),
            NoiseMode::Off,
            None,
            None,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clamping_yields_embedding_rows_at_the_end() {
        let (p, cfg, sched, vocab) = toy_sampler_parts();
        let predictor = TrainedDenoiser {
            cfg: &cfg,
            params: &p,
        };
        let table = p.get(EMBEDDING).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let start = gaussian(&mut rng, 4, 4);
        let idi = Array2::from_elem((1, 64), -0.1);
        let x0 = reverse_chain(
            &predictor,
            &idi,
            start,
            &sched,
            &mut rng,
            NoiseMode::Ancestral,
            Some(table),
            None,
        )
        .unwrap();
        for row in x0.rows() {
            assert!(table.rows().into_iter().any(|r| r == row));
        }

        let sampler = Sampler {
            params: &p,
            cfg: &cfg,
            sched: &sched,
            vocab: &vocab,
            backbone: &Backbone::Toy,
            options: SampleOptions {
                clamp: true,
                ..SampleOptions::default()
            },
        };
        let out = sampler
            .sample_caption(&image(1), &image(2), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(out.ids.len(), 4);
        let mismatched = Vocabulary::build(&[vec!["x"]]).unwrap();
        let bad = Sampler {
            vocab: &mismatched,
            ..sampler
        };
        assert!(bad
            .sample_caption(&image(1), &image(2), &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }
}
