//! Central finite differences, used as an independent oracle for the tape.
//!
//! Nothing here touches [`Tape`](super::Tape); the loss closure is evaluated
//! forward only.

use ndarray::Array2;

use crate::scalar::Scalar;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// ∂f/∂w for every entry of `w`, by `(f(w + h e) − f(w − h e)) / 2h`.
pub fn central_difference<T: Scalar>(
    w: &Array2<T>,
    h: f64,
    mut f: impl FnMut(&Array2<T>) -> T,
) -> Array2<T> {
    let h = T::lit(h);
    let two_h = h + h;
    let mut probe = w.clone();
    let mut out = Array2::zeros(w.dim());
    for idx in ndarray::indices(w.dim()) {
        let base = probe[idx];
        probe[idx] = base + h;
        let up = f(&probe);
        probe[idx] = base - h;
        let down = f(&probe);
        probe[idx] = base;
        out[idx] = (up - down) / two_h;
    }
    out
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
///
/// The floor keeps vanishing gradients from turning rounding noise into a
/// large relative error.
pub fn relative_error<T: Scalar>(a: &Array2<T>, b: &Array2<T>, floor: f64) -> f64 {
    let norm = |x: &Array2<T>| x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    let diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn differences_of_a_cubic() {
        let w = array![[1.0f64, -2.0]];
        let g = central_difference(&w, FD_STEP, |w| w.iter().map(|x| x * x * x).sum());
        assert!(relative_error(&g, &array![[3.0, 12.0]], 1e-8) < 1e-8);
    }
}
