//! Extended-latent style codes.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Dimension of every style vector.
pub const STYLE_DIM: usize = 512;

/// A point in the extended latent space: one 512-dimensional style
/// vector per generator layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    styles: Array2<f64>,
}

impl StyleCode {
    /// Wrap an `N x 512` matrix of styles.
    pub fn new(styles: Array2<f64>) -> Result<Self> {
        if styles.shape()[1] != STYLE_DIM {
            return Err(Error::ShapeMismatch {
                expected: format!("N x {STYLE_DIM}"),
                got: format!("{:?}", styles.shape()),
            });
        }
        Ok(Self { styles })
    }

    pub fn zeros(depth: usize) -> Self {
        Self {
            styles: Array2::zeros((depth, STYLE_DIM)),
        }
    }

    /// Number of style vectors (matches the generator depth it targets).
    pub fn depth(&self) -> usize {
        self.styles.shape()[0]
    }

    pub fn styles(&self) -> &Array2<f64> {
        &self.styles
    }

    pub fn styles_mut(&mut self) -> &mut Array2<f64> {
        &mut self.styles
    }

    pub fn style(&self, layer: usize) -> ndarray::ArrayView1<'_, f64> {
        self.styles.row(layer)
    }

    pub fn is_finite(&self) -> bool {
        self.styles.iter().all(|v| v.is_finite())
    }

    pub fn check_depth(&self, expected: usize) -> Result<()> {
        if self.depth() != expected {
            return Err(Error::DepthMismatch {
                expected,
                got: self.depth(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_style_dim() {
        assert!(StyleCode::new(Array2::zeros((4, 100))).is_err());
        assert!(StyleCode::new(Array2::zeros((4, STYLE_DIM))).is_ok());
    }

    #[test]
    fn depth_matches_rows() {
        let w = StyleCode::zeros(14);
        assert_eq!(w.depth(), 14);
        assert!(w.check_depth(14).is_ok());
        assert!(w.check_depth(18).is_err());
    }
}
