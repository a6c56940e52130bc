//! Painting on the embedded face and re-rendering it under driving frames.

use crate::error::{Error, Result};
use crate::networks::{drive_decode_with, drive_encode, DrivingNetwork, EmbeddedFace, FaceFrame, FlowField};
use crate::tensor::Tensor;

/// Straight-alpha RGBA image, `(1, 4, H, W)`, every channel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlayRgba(Tensor<f32>);

impl OverlayRgba {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        let [b, c, _, _] = t.shape();
        if b != 1 || c != 4 {
            return Err(Error::Shape(format!("overlay must be (1, 4, H, W), got {:?}", t.shape())));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition("overlay values must lie in [0, 1]".into()));
        }
        Ok(Self(t))
    }

    /// A fully transparent overlay.
    pub fn transparent(h: usize, w: usize) -> Self {
        Self(Tensor::zeros([1, 4, h, w]))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        let [_, _, h, w] = self.0.shape();
        (w, h)
    }
}

/// `alpha * rgb + (1 - alpha) * embedded` per pixel.
pub fn apply_overlay(embedded: &EmbeddedFace, overlay: &OverlayRgba) -> Result<EmbeddedFace> {
    let e = embedded.tensor();
    let [_, _, h, w] = e.shape();
    let [_, _, oh, ow] = overlay.0.shape();
    if (h, w) != (oh, ow) {
        return Err(Error::ResolutionMismatch {
            expected: h,
            got_w: ow,
            got_h: oh,
        });
    }
    let o = &overlay.0;
    let out = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let a = o.at([0, 3, y, x]);
        // Exact endpoints keep alpha 0 and 1 idempotent.
        if a == 0.0 {
            e.at([0, c, y, x])
        } else if a == 1.0 {
            o.at([0, c, y, x])
        } else {
            a * o.at([0, c, y, x]) + (1.0 - a) * e.at([0, c, y, x])
        }
    });
    EmbeddedFace::new(out)
}

/// Renders the (edited) embedded face under each driving frame, in order.
pub fn render_edited_sequence(
    drv: &DrivingNetwork,
    modified: &EmbeddedFace,
    driving: &[FaceFrame],
) -> Result<Vec<FaceFrame>> {
    render_edited_sequence_with(drv, modified, driving, None)
}

/// [`render_edited_sequence`] with an optional injected driving flow.
pub fn render_edited_sequence_with(
    drv: &DrivingNetwork,
    modified: &EmbeddedFace,
    driving: &[FaceFrame],
    hook: Option<&FlowField>,
) -> Result<Vec<FaceFrame>> {
    if driving.is_empty() {
        return Err(Error::Empty("no driving frames".into()));
    }
    driving
        .iter()
        .map(|f| {
            let v = drive_encode(drv, f)?;
            Ok(drive_decode_with(drv, &v, modified, hook)?.1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffops::SamplerGrid;
    use crate::networks::{embed_source, NetConfig};

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn overlay_with_alpha(alpha: f32, seed: u64) -> OverlayRgba {
        let mut t = random([1, 4, 8, 8], seed);
        t.data_mut()[3 * 64..].fill(alpha);
        OverlayRgba::new(t).unwrap()
    }

    #[test]
    fn blend_examples() {
        let e = EmbeddedFace::new(random([1, 3, 8, 8], 1)).unwrap();
        assert_eq!(apply_overlay(&e, &overlay_with_alpha(0.0, 2)).unwrap(), e);
        let full = overlay_with_alpha(1.0, 3);
        let out = apply_overlay(&e, &full).unwrap();
        assert_eq!(out.tensor().data(), &full.tensor().data()[..3 * 64]);
        // Idempotent at both endpoints.
        assert_eq!(apply_overlay(&out, &full).unwrap(), out);

        let black = EmbeddedFace::new(Tensor::zeros([1, 3, 2, 2])).unwrap();
        let mut white = Tensor::full([1, 4, 2, 2], 1.0);
        white.data_mut()[12..].fill(0.5);
        let mid = apply_overlay(&black, &OverlayRgba::new(white).unwrap()).unwrap();
        assert!(mid.tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn blend_is_affine_in_alpha() {
        let e = EmbeddedFace::new(random([1, 3, 8, 8], 4)).unwrap();
        let rgb = random([1, 4, 8, 8], 5);
        let at = |a: f32| {
            let mut t = rgb.clone();
            t.data_mut()[3 * 64..].fill(a);
            apply_overlay(&e, &OverlayRgba::new(t).unwrap()).unwrap().into_tensor()
        };
        let (lo, hi, mid) = (at(0.2), at(0.8), at(0.5));
        for i in 0..mid.len() {
            assert!((mid.data()[i] - 0.5 * (lo.data()[i] + hi.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn overlay_validation() {
        assert!(matches!(OverlayRgba::new(Tensor::zeros([1, 3, 4, 4])), Err(Error::Shape(_))));
        assert!(matches!(OverlayRgba::new(Tensor::full([1, 4, 4, 4], 1.5)), Err(Error::Precondition(_))));
        let e = EmbeddedFace::new(random([1, 3, 8, 8], 1)).unwrap();
        assert!(matches!(
            apply_overlay(&e, &OverlayRgba::transparent(4, 4)),
            Err(Error::ResolutionMismatch { .. })
        ));
    }

    fn tiny() -> NetConfig {
        NetConfig {
            resolution: 16,
            base_channels: 4,
            max_channels: 16,
            driving_vector_dim: 8,
        }
    }

    #[test]
    fn transparent_edit_changes_nothing_and_weights_are_untouched() {
        let emb = crate::networks::EmbeddingNetwork::new(tiny(), 1).unwrap();
        let drv = DrivingNetwork::new(tiny(), 2).unwrap();
        let before: Vec<Tensor<f32>> = drv.store().all().map(|(_, t)| t.clone()).collect();
        let src = FaceFrame::new(random([1, 3, 16, 16], 3)).unwrap();
        let (_, embedded) = embed_source(&emb, &src).unwrap();
        let driving: Vec<FaceFrame> = (0..3).map(|i| FaceFrame::new(random([1, 3, 16, 16], 10 + i)).unwrap()).collect();
        let plain = render_edited_sequence(&drv, &embedded, &driving).unwrap();
        let edited = apply_overlay(&embedded, &OverlayRgba::transparent(16, 16)).unwrap();
        assert_eq!(render_edited_sequence(&drv, &edited, &driving).unwrap(), plain);
        let after: Vec<Tensor<f32>> = drv.store().all().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, after);
        assert_eq!(render_edited_sequence(&drv, &embedded, &driving).unwrap(), plain);
        assert!(matches!(render_edited_sequence(&drv, &embedded, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn identity_flow_returns_the_modified_face() {
        let drv = DrivingNetwork::new(tiny(), 2).unwrap();
        let modified = EmbeddedFace::new(random([1, 3, 16, 16], 4)).unwrap();
        let driving: Vec<FaceFrame> = (0..2).map(|i| FaceFrame::new(random([1, 3, 16, 16], 20 + i)).unwrap()).collect();
        let id = SamplerGrid::identity(1, 16, 16);
        let out = render_edited_sequence_with(&drv, &modified, &driving, Some(&id)).unwrap();
        assert!(out.iter().all(|f| f.tensor() == modified.tensor()));
    }
}
