use std::cmp::Ordering;
use std::fmt;

/// Exponent multi-index of a monomial.
///
/// Ordering is graded: total degree first, then lexicographic with the
/// earlier variables ranked first, so in two variables the order starts
/// `1, x1, x2, x1^2, x1 x2, x2^2, ...`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Monomial {
    degree: u32,
    exps: Vec<u32>,
}

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        let degree = exps.iter().sum();
        Monomial { degree, exps }
    }

    pub fn one(num_vars: usize) -> Self {
        Monomial {
            degree: 0,
            exps: vec![0; num_vars],
        }
    }

    /// The monomial `x_var`.
    pub fn var(num_vars: usize, var: usize) -> Self {
        let mut exps = vec![0; num_vars];
        exps[var] = 1;
        Monomial { degree: 1, exps }
    }

    #[inline]
    pub fn degree(&self) -> u32 {
        self.degree
    }

    #[inline]
    pub fn exps(&self) -> &[u32] {
        &self.exps
    }

    #[inline]
    pub fn num_vars(&self) -> usize {
        self.exps.len()
    }

    pub fn is_one(&self) -> bool {
        self.degree == 0
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.exps.len(), other.exps.len());
        Monomial {
            degree: self.degree + other.degree,
            exps: self
                .exps
                .iter()
                .zip(&other.exps)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Evaluates the monomial at `z` with plain repeated products.
    pub fn evaluate(&self, z: &[f64]) -> f64 {
        self.exps
            .iter()
            .zip(z)
            .filter(|(e, _)| **e > 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }

    /// Enumerates all exponent tuples in `num_vars` variables with total
    /// degree at most `max_degree`, in graded order.
    pub fn enumerate(num_vars: usize, max_degree: u32) -> Vec<Monomial> {
        let mut out = Vec::new();
        let mut current = vec![0u32; num_vars];
        for degree in 0..=max_degree {
            fill(&mut current, 0, degree, &mut out);
        }
        out
    }
}

// Emits all tuples of the given degree with earlier variables taking the
// largest exponents first, which matches the graded order above.
fn fill(current: &mut Vec<u32>, pos: usize, remaining: u32, out: &mut Vec<Monomial>) {
    let n = current.len();
    if n == 0 {
        if remaining == 0 {
            out.push(Monomial::new(Vec::new()));
        }
        return;
    }
    if pos == n - 1 {
        current[pos] = remaining;
        out.push(Monomial::new(current.clone()));
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        fill(current, pos + 1, remaining - e, out);
    }
    current[pos] = 0;
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree
            .cmp(&other.degree)
            .then_with(|| other.exps.cmp(&self.exps))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.exps)
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_one() {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.exps.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}
