//! Conditioning features: backbone feature maps and their bi-temporal
//! residual.
//!
//! Feature maps are token matrices of shape `HW x C`: one row per spatial
//! position in row-major order, one column per channel.
//!
//! Two backbones are provided:
//!
//! * **toy**: three 3x3 convolutions, stride 2, padding 1, channel widths
//!   16 / 32 / 64, each followed by ReLU. A 32x32 image yields a 4x4 grid,
//!   i.e. 16 tokens of width 64. Its weights live in the model parameter
//!   store under `backbone.conv{1,2,3}.{weight,bias}` and can be trained.
//!   Pixels enter unnormalized in `[0, 1]`.
//! * **resnet**: a bottleneck ResNet (50/101/152 layouts) imported from an
//!   archive using torchvision parameter names (`conv1.weight`,
//!   `bn1.{weight,bias,running_mean,running_var}`,
//!   `layer{1..4}.{i}.conv{1,2,3}.weight`, `layer{1..4}.{i}.bn{1,2,3}.*`,
//!   `layer{1..4}.0.downsample.{0,1}.*`). Convolution weights are
//!   `[out, in, kh, kw]`. Inputs are normalized with the ImageNet channel
//!   mean/std. The final stage (stride 32) is returned; 256x256 inputs give
//!   an 8x8 grid. Imported weights are always frozen.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::Rng;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::params::{he, BoundParams, ParamStore};
use crate::tape::{im2col, ConvGeometry, Tape, Var};

pub const TOY_WIDTHS: [usize; 3] = [16, 32, 64];

/// `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::Image(format!(
                "expected 3 channels, got {}",
                pixels.shape()[2]
            )));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// `(H*W) x 3` token view of the pixels.
    pub fn to_tokens(&self) -> Array2<f64> {
        let (h, w) = (self.height(), self.width());
        self.pixels
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, 3))
            .expect("contiguous pixels")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Ok(Self { pixels })
    }

    /// 8-bit PNG; values are rounded and clamped.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| {
                (self.pixels[[y as usize, x as usize, c]] * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
            Rgb([px(0), px(1), px(2)])
        });
        buf.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Toy,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `HW x C`
    pub tokens: Array2<f64>,
    pub height: usize,
    pub width: usize,
    pub provenance: Provenance,
}

/// `I_di = F_bef - F_aft`, `HW x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFeatureMap {
    pub tokens: Array2<f64>,
    pub height: usize,
    pub width: usize,
}

impl ResidualFeatureMap {
    pub fn num_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn channels(&self) -> usize {
        self.tokens.ncols()
    }
}

pub fn residual_map(before: &FeatureMap, after: &FeatureMap) -> Result<ResidualFeatureMap> {
    if before.provenance != after.provenance {
        return Err(Error::Data(format!(
            "feature provenance differs: {:?} vs {:?}",
            before.provenance, after.provenance
        )));
    }
    if before.tokens.shape() != after.tokens.shape()
        || (before.height, before.width) != (after.height, after.width)
    {
        return Err(Error::shape(
            "residual_map",
            before.tokens.shape(),
            after.tokens.shape(),
        ));
    }
    Ok(ResidualFeatureMap {
        tokens: &before.tokens - &after.tokens,
        height: before.height,
        width: before.width,
    })
}

pub enum Backbone {
    /// Weights are read from the model parameter store.
    Toy,
    ResNet(Box<ResNet>),
}

impl Backbone {
    pub fn provenance(&self) -> Provenance {
        match self {
            Backbone::Toy => Provenance::Toy,
            Backbone::ResNet(_) => Provenance::Pretrained,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Backbone::Toy => TOY_WIDTHS[2],
            Backbone::ResNet(r) => r.out_channels(),
        }
    }

    /// Deterministic feature extraction. `params` supplies the toy weights.
    pub fn extract(&self, image: &Image, params: &ParamStore) -> Result<FeatureMap> {
        match self {
            Backbone::Toy => {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let (var, h, w) = toy_forward(&mut tape, &bound, image)?;
                Ok(FeatureMap {
                    tokens: tape.value(var).clone(),
                    height: h,
                    width: w,
                    provenance: Provenance::Toy,
                })
            }
            Backbone::ResNet(r) => r.extract(image),
        }
    }

    pub fn residual(
        &self,
        before: &Image,
        after: &Image,
        params: &ParamStore,
    ) -> Result<ResidualFeatureMap> {
        residual_map(
            &self.extract(before, params)?,
            &self.extract(after, params)?,
        )
    }
}

fn toy_names(stage: usize) -> (String, String) {
    (
        format!("backbone.conv{}.weight", stage + 1),
        format!("backbone.conv{}.bias", stage + 1),
    )
}

/// He-initialized toy backbone weights, zero biases.
pub fn init_toy_backbone<R: Rng>(rng: &mut R, store: &mut ParamStore) {
    let mut cin = 3;
    for (stage, &cout) in TOY_WIDTHS.iter().enumerate() {
        let (w, b) = toy_names(stage);
        store.insert(w, he(rng, 9 * cin, cout));
        store.insert(b, Array2::zeros((1, cout)));
        cin = cout;
    }
}

pub fn check_toy_backbone(store: &ParamStore) -> Result<()> {
    let mut cin = 3;
    for (stage, &cout) in TOY_WIDTHS.iter().enumerate() {
        let (w, b) = toy_names(stage);
        store.expect_shape(&w, 9 * cin, cout)?;
        store.expect_shape(&b, 1, cout)?;
        cin = cout;
    }
    Ok(())
}

/// Toy backbone on the tape. Returns the `HW x 64` feature var and grid size.
pub fn toy_forward(
    tape: &mut Tape<'_>,
    params: &BoundParams,
    image: &Image,
) -> Result<(Var, usize, usize)> {
    let (mut h, mut w) = (image.height(), image.width());
    if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Image(format!(
            "toy backbone needs sides divisible by 8, got {h}x{w}"
        )));
    }
    let mut x = tape.constant(image.to_tokens());
    let mut cin = 3;
    for (stage, &cout) in TOY_WIDTHS.iter().enumerate() {
        let geom = ConvGeometry {
            height: h,
            width: w,
            channels: cin,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let (wn, bn) = toy_names(stage);
        let cols = tape.im2col(x, geom);
        let wv = params.var(&wn)?;
        let bv = params.var(&bn)?;
        let z = tape.matmul(cols, wv);
        let z = tape.add_row(z, bv);
        x = tape.relu(z);
        h = geom.out_height();
        w = geom.out_width();
        cin = cout;
    }
    Ok((x, h, w))
}

const BN_EPS: f64 = 1e-5;
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Convolution with inference-mode batch norm folded in.
#[derive(Debug, Clone)]
struct ConvBn {
    /// `(k*k*cin) x cout`, im2col layout
    weight: Array2<f64>,
    scale: Array1<f64>,
    shift: Array1<f64>,
    kernel: usize,
    stride: usize,
    padding: usize,
    cin: usize,
}

impl ConvBn {
    fn load(archive: &TensorArchive, conv: &str, bn: &str, stride: usize) -> Result<Self> {
        let w = archive.get(&format!("{conv}.weight"))?;
        let shape = w.shape().to_vec();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::Archive(format!(
                "{conv}.weight: expected [out, in, k, k], got {shape:?}"
            )));
        }
        let (cout, cin, k) = (shape[0], shape[1], shape[2]);
        let weight = Array2::from_shape_fn((k * k * cin, cout), |(row, o)| {
            let ci = row % cin;
            let tap = row / cin;
            w[[o, ci, tap / k, tap % k]]
        });
        let vec = |name: &str| -> Result<Array1<f64>> {
            let t: &ArrayD<f64> = archive.get(&format!("{bn}.{name}"))?;
            if t.len() != cout {
                return Err(Error::Archive(format!(
                    "{bn}.{name}: expected {cout} entries, got {}",
                    t.len()
                )));
            }
            Ok(t.iter().copied().collect())
        };
        let gamma = vec("weight")?;
        let beta = vec("bias")?;
        let mean = vec("running_mean")?;
        let var = vec("running_var")?;
        let scale: Array1<f64> = &gamma / &var.mapv(|v| (v + BN_EPS).sqrt());
        let shift = &beta - &(&mean * &scale);
        Ok(Self {
            weight,
            scale,
            shift,
            kernel: k,
            stride,
            padding: k / 2,
            cin,
        })
    }

    fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    fn forward(
        &self,
        x: &Array2<f64>,
        h: usize,
        w: usize,
        relu: bool,
    ) -> (Array2<f64>, usize, usize) {
        let geom = ConvGeometry {
            height: h,
            width: w,
            channels: self.cin,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        let mut y = if self.kernel == 1 && self.stride == 1 {
            x.dot(&self.weight)
        } else {
            im2col(x.view(), &geom).dot(&self.weight)
        };
        for mut row in y.rows_mut() {
            row *= &self.scale;
            row += &self.shift;
            if relu {
                row.mapv_inplace(|v| v.max(0.0));
            }
        }
        (y, geom.out_height(), geom.out_width())
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    downsample: Option<ConvBn>,
}

/// Frozen bottleneck ResNet feature extractor.
#[derive(Debug, Clone)]
pub struct ResNet {
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
    stage_sizes: [usize; 4],
}

impl ResNet {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Archive(format!(
                "backbone weights not found at {}",
                path.display()
            )));
        }
        Self::from_archive(&TensorArchive::load(path)?)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let mut stem = ConvBn::load(archive, "conv1", "bn1", 2)?;
        stem.padding = 3;
        let mut blocks = Vec::new();
        let mut stage_sizes = [0; 4];
        for (li, size) in stage_sizes.iter_mut().enumerate() {
            let layer = li + 1;
            let mut i = 0;
            while archive
                .tensors
                .contains_key(&format!("layer{layer}.{i}.conv1.weight"))
            {
                let p = format!("layer{layer}.{i}");
                let stride = if i == 0 && layer > 1 { 2 } else { 1 };
                let downsample = if archive
                    .tensors
                    .contains_key(&format!("{p}.downsample.0.weight"))
                {
                    Some(ConvBn::load(
                        archive,
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        stride,
                    )?)
                } else {
                    None
                };
                blocks.push(Bottleneck {
                    conv1: ConvBn::load(archive, &format!("{p}.conv1"), &format!("{p}.bn1"), 1)?,
                    conv2: ConvBn::load(
                        archive,
                        &format!("{p}.conv2"),
                        &format!("{p}.bn2"),
                        stride,
                    )?,
                    conv3: ConvBn::load(archive, &format!("{p}.conv3"), &format!("{p}.bn3"), 1)?,
                    downsample,
                });
                i += 1;
            }
            if i == 0 {
                return Err(Error::Archive(format!("no blocks found for layer{layer}")));
            }
            *size = i;
        }
        Ok(Self {
            stem,
            blocks,
            stage_sizes,
        })
    }

    /// Blocks per stage, e.g. `[3, 4, 23, 3]` for ResNet-101.
    pub fn stage_sizes(&self) -> [usize; 4] {
        self.stage_sizes
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.conv3.out_channels())
            .unwrap_or_else(|| self.stem.out_channels())
    }

    pub fn extract(&self, image: &Image) -> Result<FeatureMap> {
        let (h, w) = (image.height(), image.width());
        if h < 32 || w < 32 {
            return Err(Error::Image(format!(
                "resnet needs at least 32x32, got {h}x{w}"
            )));
        }
        let mut x = image.to_tokens();
        for mut row in x.rows_mut() {
            for c in 0..3 {
                row[c] = (row[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        let (x, h, w) = self.stem.forward(&x, h, w, true);
        let (mut x, mut h, mut w) = max_pool_3x3_s2(&x, h, w);
        for block in &self.blocks {
            let (y, bh, bw) = block.conv1.forward(&x, h, w, true);
            let (y, bh, bw) = block.conv2.forward(&y, bh, bw, true);
            let (mut y, bh, bw) = block.conv3.forward(&y, bh, bw, false);
            let identity = match &block.downsample {
                Some(ds) => ds.forward(&x, h, w, false).0,
                None => x,
            };
            y += &identity;
            y.mapv_inplace(|v| v.max(0.0));
            x = y;
            h = bh;
            w = bw;
        }
        Ok(FeatureMap {
            tokens: x,
            height: h,
            width: w,
            provenance: Provenance::Pretrained,
        })
    }
}

fn max_pool_3x3_s2(x: &Array2<f64>, h: usize, w: usize) -> (Array2<f64>, usize, usize) {
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let c = x.ncols();
    let mut out = Array2::from_elem((oh * ow, c), f64::NEG_INFINITY);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut dst = out.row_mut(oy * ow + ox);
            for ky in 0..3 {
                let iy = (oy * 2 + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * 2 + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = x.index_axis(Axis(0), iy as usize * w + ix as usize);
                    dst.zip_mut_with(&src, |d, &s| *d = d.max(s));
                }
            }
        }
    }
    (out, oh, ow)
}
