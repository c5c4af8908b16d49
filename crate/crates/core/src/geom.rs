use serde::{Deserialize, Serialize};

/// Square region in input-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartBox {
    pub row: usize,
    pub col: usize,
    pub side: usize,
    pub score: f64,
}

impl PartBox {
    pub fn area(&self) -> usize {
        self.side * self.side
    }

    pub fn iou(&self, other: &PartBox) -> f64 {
        let overlap = |a0: usize, a1: usize, b0: usize, b1: usize| a1.min(b1).saturating_sub(a0.max(b0));
        let h = overlap(self.row, self.row + self.side, other.row, other.row + other.side);
        let w = overlap(self.col, self.col + self.side, other.col, other.col + other.side);
        let inter = (h * w) as f64;
        inter / ((self.area() + other.area()) as f64 - inter).max(f64::MIN_POSITIVE)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.side > 0 && self.row + self.side <= height && self.col + self.side <= width
    }
}
