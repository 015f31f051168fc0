//! Dense channel-major grids used for images, audio and feature maps.

/// A real grid of shape `channels × height × width`, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Wraps `data`, returning `None` when its length does not match the shape.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == channels * height * width).then_some(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    /// Number of spatial sites, `height × width`.
    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    /// The channel vector at spatial site `s = y * width + x`.
    pub fn site_vector(&self, s: usize) -> Vec<f64> {
        let hw = self.sites();
        (0..self.channels).map(|c| self.data[c * hw + s]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_major() {
        let mut g = Grid3::zeros(2, 2, 3);
        g.set(1, 0, 2, 5.0);
        assert_eq!(g.data[6 + 2], 5.0);
        assert_eq!(g.site_vector(2), vec![0.0, 5.0]);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Grid3::from_vec(1, 2, 2, vec![0.0; 3]).is_none());
    }
}
