use rand::Rng;

use crate::tensor::{lit, Element};

/// An erased rectangle: rows `top..top+height`, columns `left..left+width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErasingConfig {
    pub probability: f64,
    /// Bounds on the erased fraction of the image area.
    pub area: (f64, f64),
    /// Bounds on the rectangle's height/width ratio.
    pub aspect: (f64, f64),
}

impl Default for ErasingConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            area: (0.02, 0.4),
            aspect: (0.3, 1.0 / 0.3),
        }
    }
}

const ATTEMPTS: usize = 100;

/// With `cfg.probability`, fills one random rectangle of a `(C, H, W)` image
/// with uniform values in `[-1, 1)` across all channels. The rectangle's
/// integer area fraction always lies within `cfg.area`.
pub fn random_erasing<T: Element, R: Rng>(
    image: &mut [T],
    dims: (usize, usize, usize),
    cfg: &ErasingConfig,
    rng: &mut R,
) -> Option<Rect> {
    if cfg.probability <= 0.0 || rng.gen::<f64>() >= cfg.probability {
        return None;
    }
    let (c, h, w) = dims;
    let total = (h * w) as f64;
    for _ in 0..ATTEMPTS {
        let target = rng.gen_range(cfg.area.0..=cfg.area.1) * total;
        let ratio = rng.gen_range(cfg.aspect.0.ln()..=cfg.aspect.1.ln()).exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        let frac = (eh * ew) as f64 / total;
        if eh == 0 || ew == 0 || eh > h || ew > w || frac < cfg.area.0 || frac > cfg.area.1 {
            continue;
        }
        let top = rng.gen_range(0..=h - eh);
        let left = rng.gen_range(0..=w - ew);
        for ch in 0..c {
            for y in top..top + eh {
                for x in left..left + ew {
                    image[(ch * h + y) * w + x] = lit(rng.gen_range(-1.0..1.0));
                }
            }
        }
        return Some(Rect {
            top,
            left,
            height: eh,
            width: ew,
        });
    }
    None
}
