//! Anchor-relative box deltas.

use spgnn_eval::BBox;

/// Largest log-scale change applied when decoding.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Encodes a box relative to a reference as weighted
/// `(dx, dy, dw, dh)`: center shift in units of the reference size and log
/// size ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const RPN: BoxCoder = BoxCoder { weights: [1.0, 1.0, 1.0, 1.0] };
    pub const HEAD: BoxCoder = BoxCoder { weights: [10.0, 10.0, 5.0, 5.0] };

    pub fn encode(&self, target: &BBox, reference: &BBox) -> [f64; 4] {
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let (tx, ty) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (target.width() / rw).ln(),
            wh * (target.height() / rh).ln(),
        ]
    }

    pub fn decode(&self, deltas: &[f64], reference: &BBox) -> BBox {
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        let dw = (deltas[2] / ww).min(MAX_LOG_SCALE);
        let dh = (deltas[3] / wh).min(MAX_LOG_SCALE);
        BBox::from_center(
            rx + deltas[0] / wx * rw,
            ry + deltas[1] / wy * rh,
            rw * dw.exp(),
            rh * dh.exp(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_encode_to_zero() {
        let b = BBox::new(3.0, 4.0, 20.0, 30.0);
        assert_eq!(BoxCoder::HEAD.encode(&b, &b), [0.0; 4]);
        assert_eq!(BoxCoder::RPN.decode(&[0.0; 4], &b), b);
    }

    #[test]
    fn scale_clamp() {
        let a = BBox::new(0.0, 0.0, 16.0, 16.0);
        let d = BoxCoder::RPN.decode(&[0.0, 0.0, 50.0, 50.0], &a);
        assert!((d.width() - 1000.0).abs() < 1e-9);
        assert!((MAX_LOG_SCALE - (1000.0f64 / 16.0).ln()).abs() < 1e-15);
    }
}
