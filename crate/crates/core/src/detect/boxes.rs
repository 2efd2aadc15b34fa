use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Axis-aligned box in pixel coordinates, corners inclusive of the extent
/// (`x_max - x_min` is the width).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !ok || x_min > x_max || y_min > y_max {
            return Err(contract(
                "bounding_box",
                format!("invalid corners ({x_min}, {y_min}, {x_max}, {y_max})"),
            ));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Clamps to `[0, width] x [0, height]`.
    pub fn clamp(&self, width: f64, height: f64) -> Self {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        Self {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }
}

/// Box prior, in pixels at the network input scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub width: f64,
    pub height: f64,
}

impl Anchor {
    pub const fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }
}

/// The nine default priors, smallest first.
pub const DEFAULT_ANCHORS: [Anchor; 9] = [
    Anchor::new(10.0, 13.0),
    Anchor::new(16.0, 30.0),
    Anchor::new(33.0, 23.0),
    Anchor::new(30.0, 61.0),
    Anchor::new(62.0, 45.0),
    Anchor::new(59.0, 119.0),
    Anchor::new(116.0, 90.0),
    Anchor::new(156.0, 198.0),
    Anchor::new(373.0, 326.0),
];

/// IoU of two boxes of the given sizes sharing a center.
pub fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A located fish candidate. With a single class, `class_score` is the
/// probability of "fish" given an object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub class_score: f64,
}

impl Detection {
    /// Ranking score: objectness times class score.
    pub fn score(&self) -> f64 {
        self.objectness * self.class_score
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverted_corners_are_rejected() {
        assert!(BoundingBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn clamp_keeps_box_inside_image() {
        let b = BoundingBox::from_center(5.0, 5.0, 20.0, 4.0).clamp(10.0, 10.0);
        assert_eq!(b, BoundingBox::new(0.0, 3.0, 10.0, 7.0).unwrap());
    }

    #[test]
    fn shape_iou_of_own_shape_is_one() {
        for a in DEFAULT_ANCHORS {
            assert_eq!(shape_iou(a.width, a.height, a.width, a.height), 1.0);
        }
    }
}
