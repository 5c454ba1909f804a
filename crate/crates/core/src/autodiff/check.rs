//! Independent gradient checks: central finite differences and flat-vector
//! comparison of two gradient maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference Jacobian of `f` at the flat vector `x`: column `j` is
/// `(f(x + h e_j) - f(x - h e_j)) / 2h`. Output is `[len(f(x)), len(x)]`.
pub fn finite_difference_jacobian<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    let n = x.len();
    let out_len = f(x)?.len();
    let mut jac = vec![0.0; out_len * n];
    for j in 0..n {
        let mut plus = x.clone();
        plus.data_mut()[j] += h;
        let mut minus = x.clone();
        minus.data_mut()[j] -= h;
        let fp = f(&plus)?;
        let fm = f(&minus)?;
        for i in 0..out_len {
            jac[i * n + j] = (fp.data()[i] - fm.data()[i]) / (2.0 * h);
        }
    }
    Tensor::new(vec![out_len, n], jac)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientReport {
    pub max_abs_error: f64,
    pub rel_l2_error: f64,
    pub cosine_similarity: f64,
    /// name -> (max abs error, relative l2 error)
    pub per_parameter: BTreeMap<String, (f64, f64)>,
}

impl GradientReport {
    /// `param,max_abs,rel_l2` rows in name order, then an `ALL` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,max_abs,rel_l2\n");
        for (name, (ma, rl)) in &self.per_parameter {
            let _ = writeln!(out, "{name},{ma:.6e},{rl:.6e}");
        }
        let _ = writeln!(out, "ALL,{:.6e},{:.6e}", self.max_abs_error, self.rel_l2_error);
        out
    }

    /// Keeps the worse value of each field.
    pub fn worst(&self, other: &GradientReport) -> GradientReport {
        let mut per = self.per_parameter.clone();
        for (k, (ma, rl)) in &other.per_parameter {
            let e = per.entry(k.clone()).or_insert((0.0, 0.0));
            e.0 = e.0.max(*ma);
            e.1 = e.1.max(*rl);
        }
        GradientReport {
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            rel_l2_error: self.rel_l2_error.max(other.rel_l2_error),
            cosine_similarity: self.cosine_similarity.min(other.cosine_similarity),
            per_parameter: per,
        }
    }
}

fn rel(diff_sq: f64, ref_sq: f64) -> f64 {
    if ref_sq == 0.0 {
        if diff_sq == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (diff_sq / ref_sq).sqrt()
    }
}

/// Compares two gradient maps over their concatenation in sorted-name order.
pub fn compare_gradients(
    test: &BTreeMap<String, Tensor>,
    reference: &BTreeMap<String, Tensor>,
) -> Result<GradientReport> {
    if test.len() != reference.len() || test.keys().zip(reference.keys()).any(|(a, b)| a != b) {
        let missing: Vec<_> = reference.keys().filter(|k| !test.contains_key(*k)).collect();
        let extra: Vec<_> = test.keys().filter(|k| !reference.contains_key(*k)).collect();
        return Err(Error::Argument(format!(
            "gradient key sets differ: missing {missing:?}, extra {extra:?}"
        )));
    }
    let (mut dot, mut tt, mut rr, mut dd, mut max_abs) = (0.0, 0.0, 0.0, 0.0, 0.0f64);
    let mut per_parameter = BTreeMap::new();
    for (name, t) in test {
        let r = &reference[name];
        if t.shape() != r.shape() {
            return Err(Error::dim(
                "compare_gradients",
                format!("{name}: {:?} vs {:?}", t.shape(), r.shape()),
            ));
        }
        let (mut p_dd, mut p_rr, mut p_max) = (0.0, 0.0, 0.0f64);
        for (&a, &b) in t.data().iter().zip(r.data()) {
            let d = a - b;
            p_dd += d * d;
            p_rr += b * b;
            p_max = p_max.max(d.abs());
            dot += a * b;
            tt += a * a;
        }
        dd += p_dd;
        rr += p_rr;
        max_abs = max_abs.max(p_max);
        per_parameter.insert(name.clone(), (p_max, rel(p_dd, p_rr)));
    }
    let cosine = if tt == 0.0 && rr == 0.0 {
        1.0
    } else if tt == 0.0 || rr == 0.0 {
        0.0
    } else {
        (dot / (tt * rr).sqrt()).clamp(-1.0, 1.0)
    };
    Ok(GradientReport {
        max_abs_error: max_abs,
        rel_l2_error: rel(dd, rr),
        cosine_similarity: cosine,
        per_parameter,
    })
}
