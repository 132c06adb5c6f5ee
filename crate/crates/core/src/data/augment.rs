use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image_io::sample_bilinear;
use crate::tensor::{Tensor, TensorError, TensorResult};
use crate::{Error, Result};

/// Random geometric augmentation and the input remapping used by the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation angles are drawn from `[−r·π, r·π]`.
    pub rotation_range: f64,
    /// Zoom factors are drawn from `[1 − z, 1 + z]`.
    pub zoom_range: f64,
    pub horizontal_flip: bool,
    /// Target interval for [`AugmentConfig::normalize`].
    pub normalize_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_range: 0.3,
            zoom_range: 0.3,
            horizontal_flip: true,
            normalize_range: (-1.0, 1.0),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            rotation_range: 0.0,
            zoom_range: 0.0,
            horizontal_flip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.normalize_range;
        if self.rotation_range < 0.0 || !(0.0..1.0).contains(&self.zoom_range) || lo >= hi {
            return Err(Error::Config(format!(
                "invalid augmentation settings {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_range == 0.0 && self.zoom_range == 0.0 && !self.horizontal_flip
    }

    /// Affine map of `[0, 1]` pixel values onto `normalize_range`.
    pub fn normalize(&self, image: &Tensor) -> TensorResult<Tensor> {
        let (lo, hi) = self.normalize_range;
        image.map(|v| lo + (hi - lo) * v)
    }
}

/// One random draw of rotation, zoom and flip applied to `image`.
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor> {
    config.validate()?;
    if config.is_identity() {
        return Ok(image.clone());
    }
    let angle = if config.rotation_range > 0.0 {
        rng.gen_range(-config.rotation_range..=config.rotation_range) * std::f64::consts::PI
    } else {
        0.0
    };
    let zoom = if config.zoom_range > 0.0 {
        rng.gen_range(1.0 - config.zoom_range..=1.0 + config.zoom_range)
    } else {
        1.0
    };
    let flip = config.horizontal_flip && rng.gen_bool(0.5);
    Ok(transform(image, angle, zoom, flip)?)
}

/// Deterministic rotation (radians, about the centre), zoom (>1 magnifies)
/// and optional horizontal flip, with edge replication outside the frame.
pub fn transform(image: &Tensor, angle: f64, zoom: f64, flip: bool) -> TensorResult<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "transform",
            msg: format!("expects c×h×w, got {:?}", image.shape()),
        });
    };
    if !(zoom > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "transform",
            msg: format!("zoom must be positive, got {zoom}"),
        });
    }
    let src = if flip {
        flip_horizontal(image)?
    } else {
        image.clone()
    };
    if angle == 0.0 && zoom == 1.0 {
        return Ok(src);
    }
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (sin, cos) = (-angle).sin_cos();
    let d = src.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / zoom, (x as f64 - cx) / zoom);
                let sy = cy + sin * dx + cos * dy;
                let sx = cx + cos * dx - sin * dy;
                out.push(sample_bilinear(plane, h, w, sy, sx));
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn flip_horizontal(image: &Tensor) -> TensorResult<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "flip_horizontal",
            msg: format!("expects c×h×w, got {:?}", image.shape()),
        });
    };
    let d = image.data();
    let mut out = Vec::with_capacity(d.len());
    for row in 0..c * h {
        out.extend(d[row * w..(row + 1) * w].iter().rev());
    }
    Tensor::new(vec![c, h, w], out)
}
