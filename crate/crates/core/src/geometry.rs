/// Axis-aligned pixel rectangle with inclusive corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1);
        PixelBox { x0, y0, x1, y1 }
    }

    /// The whole `width × height` image.
    pub fn full(width: usize, height: usize) -> Self {
        PixelBox::new(0, 0, width - 1, height - 1)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn contains_box(&self, other: &PixelBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 < width && self.y1 < height
    }

    /// Square of side `side` centred on `(cx, cy)`, clipped to the image.
    pub fn centered_square(cx: usize, cy: usize, side: usize, width: usize, height: usize) -> Self {
        let side = side.max(1);
        let half_lo = (side - 1) / 2;
        let half_hi = side - 1 - half_lo;
        PixelBox::new(
            cx.saturating_sub(half_lo),
            cy.saturating_sub(half_lo),
            (cx + half_hi).min(width - 1),
            (cy + half_hi).min(height - 1),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_square_is_clipped() {
        let b = PixelBox::centered_square(0, 63, 16, 64, 64);
        assert_eq!(b, PixelBox::new(0, 56, 8, 63));
        let c = PixelBox::centered_square(32, 32, 16, 64, 64);
        assert_eq!((c.width(), c.height()), (16, 16));
        assert!(c.contains(32, 32));
    }

    #[test]
    fn containment() {
        let outer = PixelBox::new(2, 2, 10, 10);
        assert!(outer.contains(2, 10));
        assert!(!outer.contains(11, 5));
        assert!(outer.contains_box(&PixelBox::new(3, 3, 10, 9)));
        assert!(!outer.contains_box(&PixelBox::new(1, 3, 10, 9)));
    }
}
