//! Savitzky–Golay smoothing of control sequences.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::Control;
use crate::{Error, Result};

/// Precomputed smoothing rows for one `(len, window, order)` triple.
///
/// Every output sample is the value at its own position of the
/// least-squares polynomial fitted to `window` consecutive inputs. Interior
/// samples use the centred window; near the ends the window is truncated at
/// the boundary and extended on the other side so it keeps its length.
#[derive(Debug, Clone, PartialEq)]
pub struct SavGol {
    len: usize,
    window: usize,
    order: usize,
    /// `(start, coefficients)` for each output position.
    rows: Vec<(usize, Vec<f64>)>,
}

impl SavGol {
    pub fn new(len: usize, window: usize, order: usize) -> Result<Self> {
        validate(window, order)?;
        if len < window {
            return Err(Error::config(
                "sg_window",
                format!("window {window} is longer than the horizon {len}"),
            ));
        }
        let half = window / 2;
        let rows = (0..len)
            .map(|i| {
                let start = i.saturating_sub(half).min(len - window);
                Ok((start, fit_row(window, order, i - start)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            len,
            window,
            order,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.len, "sequence length differs from the filter");
        self.rows
            .iter()
            .map(|(start, c)| c.iter().zip(&x[*start..]).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Smooths both channels of a control sequence.
    pub fn apply_controls(&self, u: &[Control]) -> Vec<Control> {
        let v: Vec<f64> = u.iter().map(|c| c.v).collect();
        let w: Vec<f64> = u.iter().map(|c| c.omega).collect();
        self.apply(&v)
            .into_iter()
            .zip(self.apply(&w))
            .map(|(v, omega)| Control { v, omega })
            .collect()
    }
}

pub(crate) fn validate(window: usize, order: usize) -> Result<()> {
    if window.is_multiple_of(2) {
        return Err(Error::config("sg_window", "window must be odd"));
    }
    if window <= order {
        return Err(Error::config(
            "sg_order",
            format!("order {order} must be below the window {window}"),
        ));
    }
    Ok(())
}

/// Weights that evaluate the least-squares polynomial of degree `order`,
/// fitted to samples `0..window`, at sample `at`.
fn fit_row(window: usize, order: usize, at: usize) -> Result<Vec<f64>> {
    // Offsets are scaled to [-1, 1] to keep the Vandermonde matrix well
    // conditioned.
    let scale = ((window - 1) as f64 / 2.0).max(1.0);
    let t0 = at as f64;
    let a = DMatrix::from_fn(window, order + 1, |r, c| ((r as f64 - t0) / scale).powi(c as i32));
    let pinv = a
        .svd(true, true)
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Numerical(format!("Savitzky-Golay fit failed: {e}")))?;
    // The fitted polynomial evaluated at offset zero is its constant term.
    let row: DVector<f64> = pinv.row(0).transpose();
    Ok(row.iter().copied().collect())
}

/// One-shot smoothing of a control sequence.
pub fn sg_smooth(u: &[Control], window: usize, order: usize) -> Result<Vec<Control>> {
    Ok(SavGol::new(u.len(), window, order)?.apply_controls(u))
}
