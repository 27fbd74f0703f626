//! Image features for the decoder: the binary annotation-grid format, a small
//! frozen convolutional encoder for running from raw pixels, and the 2x2
//! max-pool that shrinks a grid to a quarter of its positions.

mod features;
mod toy;

pub use features::{load_features, save_features};
pub use toy::{toy_encode, ConvStage, Raster, ToyEncoderParams};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Spatial feature map, `rows x cols x channels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 || data.len() != rows * cols * channels {
            return Err(Error::dim(
                "feature grid",
                format!("{rows}x{cols}x{channels} with {} values", data.len()),
            ));
        }
        Ok(FeatureGrid {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn into_annotations(self, image_id: impl Into<String>) -> Result<AnnotationSet> {
        AnnotationSet::new(image_id, self.rows, self.cols, self.channels, self.data)
    }
}

/// The `L = rows * cols` annotation vectors of one image, each of dimension `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    image_id: String,
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
}

impl AnnotationSet {
    pub fn new(
        image_id: impl Into<String>,
        rows: usize,
        cols: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 || data.len() != rows * cols * dim {
            return Err(Error::dim(
                "annotation set",
                format!("{rows}x{cols} grid of {dim}-vectors with {} values", data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("annotation set"));
        }
        Ok(AnnotationSet {
            image_id: image_id.into(),
            rows,
            cols,
            dim,
            data,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of annotation vectors `L`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Annotation vector `j` in row-major grid order.
    pub fn vector(&self, j: usize) -> &[f32] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    /// `[L x D]` matrix for the differentiation tape.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.len(), self.dim], &self.data).expect("validated shape")
    }
}

/// 2x2 max-pool over grid positions, elementwise per channel.
pub fn pool_quarter(a: &AnnotationSet) -> Result<AnnotationSet> {
    if a.rows % 2 != 0 || a.cols % 2 != 0 {
        return Err(Error::dim(
            "pool_quarter",
            format!("grid {}x{} has an odd side", a.rows, a.cols),
        ));
    }
    let (ro, co, d) = (a.rows / 2, a.cols / 2, a.dim);
    let mut out = vec![f32::NEG_INFINITY; ro * co * d];
    for i in 0..ro {
        for j in 0..co {
            let dst = &mut out[(i * co + j) * d..(i * co + j + 1) * d];
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = a.vector((2 * i + di) * a.cols + 2 * j + dj);
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o = o.max(x);
                }
            }
        }
    }
    AnnotationSet::new(a.image_id.clone(), ro, co, d, out)
}
