use std::fmt;
use std::sync::Arc;

pub type BasisFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Known basis `(1, phi_2, ..., phi_p)` on `R^d`.
///
/// The intercept is always the first function; constructors prepend it, so
/// a basis without intercept cannot be built.
#[derive(Clone)]
pub struct BasisSpec {
    input_dim: usize,
    names: Vec<String>,
    functions: Vec<BasisFn>,
}

impl fmt::Debug for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BasisSpec")
            .field("input_dim", &self.input_dim)
            .field("names", &self.names)
            .finish()
    }
}

impl BasisSpec {
    /// Intercept followed by `terms`.
    pub fn with_intercept(input_dim: usize, terms: Vec<(String, BasisFn)>) -> Self {
        let mut names = vec!["1".to_string()];
        let mut functions: Vec<BasisFn> = vec![Arc::new(|_: &[f64]| 1.0)];
        for (name, f) in terms {
            names.push(name);
            functions.push(f);
        }
        Self {
            input_dim,
            names,
            functions,
        }
    }

    /// `1, x_j^k` for `k = 1..=degree` and every input coordinate `j`.
    pub fn polynomial(degree: usize, input_dim: usize) -> Self {
        Self::polynomial_named(degree, &(1..=input_dim).map(|j| format!("x{j}")).collect::<Vec<_>>())
    }

    /// Polynomial basis with the given coordinate names.
    pub fn polynomial_named(degree: usize, coordinates: &[String]) -> Self {
        let mut terms: Vec<(String, BasisFn)> = Vec::new();
        for k in 1..=degree {
            for (j, name) in coordinates.iter().enumerate() {
                let label = if k == 1 { name.clone() } else { format!("{name}^{k}") };
                let power = k as i32;
                terms.push((label, Arc::new(move |x: &[f64]| x[j].powi(power))));
            }
        }
        Self::with_intercept(coordinates.len(), terms)
    }

    pub fn linear(input_dim: usize) -> Self {
        Self::polynomial(1, input_dim)
    }

    /// Number of basis functions `p`.
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.functions) {
            *o = f(x);
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    /// `phi(x)^T coefficients`.
    pub fn predict(&self, coefficients: &[f64], x: &[f64]) -> f64 {
        self.functions.iter().zip(coefficients).map(|(f, c)| f(x) * c).sum()
    }
}
