//! Uncertain affine parameter-varying dynamics
//! `x_{k+1} = A(w_k) x_k + B(w_k) u_k + c(w_k)`
//! and their stacked finite-horizon form.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Callback signature for matrices with arbitrary disturbance dependence.
pub type MatrixEvaluator = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A matrix-valued function of the stage disturbance.
#[derive(Clone)]
pub enum MatrixFamily {
    Constant(DMatrix<f64>),
    /// `base + sum_i w[i] * terms[i]`; `terms` may be shorter than `n_w`.
    AffineInW {
        base: DMatrix<f64>,
        terms: Vec<DMatrix<f64>>,
    },
    Callback {
        nrows: usize,
        ncols: usize,
        eval: MatrixEvaluator,
    },
}

impl fmt::Debug for MatrixFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixFamily::Constant(m) => write!(f, "Constant({}x{})", m.nrows(), m.ncols()),
            MatrixFamily::AffineInW { base, terms } => {
                write!(f, "AffineInW({}x{}, {} terms)", base.nrows(), base.ncols(), terms.len())
            }
            MatrixFamily::Callback { nrows, ncols, .. } => write!(f, "Callback({nrows}x{ncols})"),
        }
    }
}

impl MatrixFamily {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            MatrixFamily::Constant(m) => (m.nrows(), m.ncols()),
            MatrixFamily::AffineInW { base, .. } => (base.nrows(), base.ncols()),
            MatrixFamily::Callback { nrows, ncols, .. } => (*nrows, *ncols),
        }
    }

    pub fn evaluate(&self, w: &DVector<f64>) -> DMatrix<f64> {
        match self {
            MatrixFamily::Constant(m) => m.clone(),
            MatrixFamily::AffineInW { base, terms } => {
                let mut out = base.clone();
                for (i, t) in terms.iter().enumerate() {
                    out += t * w[i];
                }
                out
            }
            MatrixFamily::Callback { nrows, ncols, eval } => {
                let m = eval(w);
                assert_eq!((m.nrows(), m.ncols()), (*nrows, *ncols), "callback shape mismatch");
                m
            }
        }
    }
}

/// The system matrices together with signal dimensions.
#[derive(Clone, Debug)]
pub struct UncertainSystem {
    pub a: MatrixFamily,
    pub b: MatrixFamily,
    pub c: MatrixFamily,
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
}

/// Stacked-horizon matrices: the state sequence `(x_0, ..., x_N)` satisfies
/// `xbold = abold * x0 + bbold * ubold + cbold` where `ubold` stacks
/// `(u_0, ..., u_{N-1})`.
#[derive(Clone, Debug)]
pub struct StackedDynamics {
    pub abold: DMatrix<f64>,
    pub bbold: DMatrix<f64>,
    pub cbold: DVector<f64>,
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
}

impl StackedDynamics {
    /// Applies the stacked map to an initial state and input sequence.
    pub fn states(&self, x0: &DVector<f64>, ubold: &DVector<f64>) -> Vec<DVector<f64>> {
        let xs = &self.abold * x0 + &self.bbold * ubold + &self.cbold;
        (0..=self.horizon)
            .map(|k| xs.rows(k * self.n_x, self.n_x).into_owned())
            .collect()
    }
}

impl UncertainSystem {
    pub fn new(a: MatrixFamily, b: MatrixFamily, c: MatrixFamily, n_w: usize) -> Result<Self> {
        let (ar, ac) = a.shape();
        let (br, bc) = b.shape();
        let (cr, cc) = c.shape();
        if ar != ac || br != ar || cr != ar || cc != 1 {
            return Err(Error::Dimension(format!(
                "inconsistent system shapes: A {ar}x{ac}, B {br}x{bc}, c {cr}x{cc}"
            )));
        }
        Ok(UncertainSystem { a, b, c, n_x: ar, n_u: bc, n_w })
    }

    /// Simulates one trajectory; `ws` must provide at least `us.len()`
    /// stage disturbances. Returns `(x_0, ..., x_N)` with `N = us.len()`.
    pub fn simulate(
        &self,
        x0: &DVector<f64>,
        us: &[DVector<f64>],
        ws: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        if ws.len() < us.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but only {} stage disturbances",
                us.len(),
                ws.len()
            )));
        }
        if x0.len() != self.n_x {
            return Err(Error::Dimension(format!(
                "initial state has {} entries, expected {}",
                x0.len(),
                self.n_x
            )));
        }
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(x0.clone());
        for (k, u) in us.iter().enumerate() {
            let w = &ws[k];
            let x = xs.last().unwrap();
            let next =
                self.a.evaluate(w) * x + self.b.evaluate(w) * u + self.c.evaluate(w).column(0);
            xs.push(next);
        }
        Ok(xs)
    }

    /// Builds the stacked-horizon matrices for the disturbance realization
    /// `ws` over `horizon` steps. Block row `k` of `abold` is the state
    /// transition product `A(w_{k-1}) ... A(w_0)` (identity at `k = 0`);
    /// `bbold` block `(k, j)` is `A(w_{k-1}) ... A(w_{j+1}) B(w_j)` for
    /// `j < k` and zero otherwise, with the matching convolution for `cbold`.
    pub fn stack(&self, ws: &[DVector<f64>], horizon: usize) -> Result<StackedDynamics> {
        if ws.len() < horizon {
            return Err(Error::Dimension(format!(
                "horizon {horizon} needs {horizon} stage disturbances, got {}",
                ws.len()
            )));
        }
        let (n_x, n_u) = (self.n_x, self.n_u);
        let mut abold = DMatrix::zeros((horizon + 1) * n_x, n_x);
        let mut bbold = DMatrix::zeros((horizon + 1) * n_x, horizon * n_u);
        let mut cbold = DVector::zeros((horizon + 1) * n_x);
        abold
            .view_mut((0, 0), (n_x, n_x))
            .copy_from(&DMatrix::identity(n_x, n_x));
        for k in 0..horizon {
            let a_k = self.a.evaluate(&ws[k]);
            let b_k = self.b.evaluate(&ws[k]);
            let c_k = self.c.evaluate(&ws[k]).column(0).into_owned();
            // row k+1 = A(w_k) * row k, then a fresh B block and c offset
            let prev_a = abold.view((k * n_x, 0), (n_x, n_x)).into_owned();
            abold
                .view_mut(((k + 1) * n_x, 0), (n_x, n_x))
                .copy_from(&(&a_k * prev_a));
            let prev_b = bbold.view((k * n_x, 0), (n_x, horizon * n_u)).into_owned();
            bbold
                .view_mut(((k + 1) * n_x, 0), (n_x, horizon * n_u))
                .copy_from(&(&a_k * prev_b));
            bbold
                .view_mut(((k + 1) * n_x, k * n_u), (n_x, n_u))
                .copy_from(&b_k);
            let prev_c = cbold.rows(k * n_x, n_x).into_owned();
            cbold
                .rows_mut((k + 1) * n_x, n_x)
                .copy_from(&(&a_k * prev_c + c_k));
        }
        Ok(StackedDynamics { abold, bbold, cbold, n_x, n_u, horizon })
    }
}
