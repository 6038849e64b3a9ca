//! Calibrated pinhole views.

use nalgebra::{Matrix3, Vector3};

use crate::error::{MvsError, Result};
use crate::grid::Grid;

/// One calibrated image: intrinsics, world→camera pose and pixel data.
///
/// `image` holds grayscale intensities in `[0, 1]`; `corrected_image`, when
/// present, is the highlight-removed variant used for matching.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub id: u32,
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub image: Grid<f32>,
    pub corrected_image: Option<Grid<f32>>,
    k_inv: Matrix3<f64>,
    center: Vector3<f64>,
}

impl CameraView {
    pub fn new(
        id: u32,
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        image: Grid<f32>,
    ) -> Result<Self> {
        let width = image.width();
        let height = image.height();
        if width < 32 || height < 32 {
            return Err(MvsError::Validation {
                view: id,
                message: format!("image {width}x{height} below minimum 32x32"),
            });
        }
        if (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(MvsError::Validation {
                view: id,
                message: "intrinsic matrix K[2][2] must be 1".into(),
            });
        }
        let rtr = r.transpose() * r;
        if (rtr - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(MvsError::Validation {
                view: id,
                message: "rotation is not orthonormal within 1e-6".into(),
            });
        }
        let k_inv = k.try_inverse().ok_or(MvsError::Validation {
            view: id,
            message: "intrinsic matrix is singular".into(),
        })?;
        let center = -r.transpose() * t;
        Ok(CameraView {
            id,
            k,
            r,
            t,
            width,
            height,
            image,
            corrected_image: None,
            k_inv,
            center,
        })
    }

    #[inline]
    pub fn k_inv(&self) -> &Matrix3<f64> {
        &self.k_inv
    }

    /// Camera center in world coordinates, `-Rᵀ T`.
    #[inline]
    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    /// Viewing-ray direction of a pixel in camera coordinates (`z = 1`).
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        self.k_inv * Vector3::new(x, y, 1.0)
    }

    /// Intensity grid used for matching: the corrected image when available
    /// and enabled, the raw image otherwise.
    #[inline]
    pub fn matching_image(&self, use_corrected: bool) -> &Grid<f32> {
        match (&self.corrected_image, use_corrected) {
            (Some(c), true) => c,
            _ => &self.image,
        }
    }

    #[inline]
    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }
}

/// Build an intrinsic matrix from focal lengths and principal point.
pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_image(w: usize, h: usize) -> Grid<f32> {
        Grid::new(w, h, 0.5)
    }

    #[test]
    fn identity_pose_parses() {
        let v = CameraView::new(
            0,
            intrinsics(500.0, 500.0, 32.0, 32.0),
            Matrix3::identity(),
            Vector3::zeros(),
            flat_image(64, 64),
        )
        .unwrap();
        assert_eq!(v.center(), Vector3::zeros());
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        let err = CameraView::new(
            0,
            intrinsics(500.0, 500.0, 32.0, 32.0),
            r,
            Vector3::zeros(),
            flat_image(64, 64),
        );
        assert!(err.is_err());
    }

    #[test]
    fn tiny_image_rejected() {
        let err = CameraView::new(
            3,
            intrinsics(500.0, 500.0, 8.0, 8.0),
            Matrix3::identity(),
            Vector3::zeros(),
            flat_image(16, 16),
        );
        assert!(matches!(err, Err(MvsError::Validation { view: 3, .. })));
    }
}
