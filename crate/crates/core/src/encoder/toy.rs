//! A fixed, randomly initialised convnet: each stage is a 3x3 same-padded
//! convolution, ReLU, then 2x2 average pooling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureGrid;
use crate::error::{Error, Result};

/// `height x width x channels` image, row-major, values typically in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::dim(
                "raster",
                format!("{height}x{width}x{channels} with {} values", data.len()),
            ));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Raster::new(h as usize, w as usize, 3, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStage {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`.
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderParams {
    pub stages: Vec<ConvStage>,
}

impl ToyEncoderParams {
    /// He-uniform kernels and zero biases; `channels[0]` is the input depth.
    pub fn random(channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = channels
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let bound = (6.0 / (9 * cin) as f32).sqrt();
                ConvStage {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect(),
                    bias: vec![0.0; cout],
                }
            })
            .collect();
        ToyEncoderParams { stages }
    }

    pub fn stride(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }
}

/// Runs every stage; the output grid is `height/stride x width/stride`.
pub fn toy_encode(image: &Raster, params: &ToyEncoderParams) -> Result<FeatureGrid> {
    let stride = params.stride();
    if params.stages.is_empty() {
        return Err(Error::Config("encoder has no stages".into()));
    }
    if image.height % stride != 0 || image.width % stride != 0 {
        return Err(Error::dim(
            "toy_encode",
            format!("{}x{} image is not divisible by stride {stride}", image.height, image.width),
        ));
    }
    let (mut h, mut w, mut c) = (image.height, image.width, image.channels);
    let mut x: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
    for stage in &params.stages {
        if stage.in_channels != c
            || stage.kernel.len() != stage.out_channels * c * 9
            || stage.bias.len() != stage.out_channels
        {
            return Err(Error::dim(
                "toy_encode",
                format!("stage expects {} input channels, got {c}", stage.in_channels),
            ));
        }
        let conv = conv3x3_relu(&x, h, w, c, stage);
        x = mean_pool(&conv, h, w, stage.out_channels);
        h /= 2;
        w /= 2;
        c = stage.out_channels;
    }
    FeatureGrid::new(h, w, c, x.into_iter().map(|v| v as f32).collect())
}

fn conv3x3_relu(x: &[f64], h: usize, w: usize, c: usize, stage: &ConvStage) -> Vec<f64> {
    let co = stage.out_channels;
    let mut out = vec![0.0; h * w * co];
    for y in 0..h {
        for xx in 0..w {
            for o in 0..co {
                let mut acc = stage.bias[o] as f64;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (sy as usize * w + sx as usize) * c;
                        for i in 0..c {
                            let k = stage.kernel[((o * c + i) * 3 + ky) * 3 + kx] as f64;
                            acc += k * x[src + i];
                        }
                    }
                }
                out[(y * w + xx) * co + o] = acc.max(0.0);
            }
        }
    }
    out
}

fn mean_pool(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo * c];
    for i in 0..ho {
        for j in 0..wo {
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = ((2 * i + di) * w + 2 * j + dj) * c;
                for k in 0..c {
                    out[(i * wo + j) * c + k] += 0.25 * x[src + k];
                }
            }
        }
    }
    out
}
