use super::{Mat, Real};

/// A fixed sparse 4-linear form `Σ c · x0[i0] x1[i1] x2[i2] x3[i3]` applied
/// independently to every row.
///
/// Evaluating the form "at slot `s`" yields the vector
/// `out[i_s] = Σ c · Π_{j≠s} x_j[i_j]`, so a trilinear map and all of its
/// partial derivatives are instances of the same object.
#[derive(Debug, Clone, PartialEq)]
pub struct TrilinearForm {
    widths: [usize; 4],
    entries: Vec<[u32; 4]>,
    coeffs: Vec<f64>,
}

impl TrilinearForm {
    pub fn new(widths: [usize; 4]) -> Self {
        Self { widths, entries: Vec::new(), coeffs: Vec::new() }
    }

    pub fn push(&mut self, idx: [usize; 4], coeff: f64) {
        for (i, w) in idx.iter().zip(self.widths) {
            assert!(*i < w, "trilinear index {i} out of width {w}");
        }
        self.entries.push(idx.map(|i| i as u32));
        self.coeffs.push(coeff);
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = ([usize; 4], f64)> + '_ {
        self.entries.iter().zip(&self.coeffs).map(|(e, &c)| (e.map(|i| i as usize), c))
    }

    /// Evaluates at `slot`; `inputs[j]` must be `Some` exactly for `j != slot`.
    pub fn eval<T: Real>(&self, slot: usize, inputs: [Option<&Mat<T>>; 4]) -> Mat<T> {
        let others: Vec<usize> = (0..4).filter(|&j| j != slot).collect();
        let xs: Vec<&Mat<T>> = others.iter().map(|&j| inputs[j].expect("trilinear input")).collect();
        let rows = xs[0].rows;
        for (x, &j) in xs.iter().zip(&others) {
            assert_eq!(x.rows, rows, "trilinear row count");
            assert_eq!(x.cols, self.widths[j], "trilinear width at slot {j}");
        }
        let coeffs: Vec<T> = self.coeffs.iter().map(|&c| T::from_f64(c)).collect();
        let (a, b, c) = (others[0], others[1], others[2]);
        let width = self.widths[slot];
        let mut out = Mat::zeros(rows, width);
        for r in 0..rows {
            let (xa, xb, xc) = (xs[0].row(r), xs[1].row(r), xs[2].row(r));
            let orow = &mut out.data[r * width..(r + 1) * width];
            for (e, &k) in self.entries.iter().zip(&coeffs) {
                let v = k * xa[e[a] as usize] * xb[e[b] as usize] * xc[e[c] as usize];
                orow[e[slot] as usize] += v;
            }
        }
        out
    }
}
