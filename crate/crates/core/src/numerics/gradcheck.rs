//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many entries (seeded subsample); `None` checks all.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Magnitudes below this floor are compared absolutely rather than
    /// relatively.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_entries: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EntryError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<EntryError>,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck {}: {} entries, max rel error {:.3e} (tol {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.checked,
            self.max_rel_error,
            self.tol
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                ", worst {}[{}] analytic {:.6e} numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` (one tensor per parameter, in store order) against
/// central differences of `loss_fn` around the current parameter values.
pub fn grad_check<F>(
    store: &ParamStore,
    analytic: &[Tensor],
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(cfg.eps > 0.0) {
        return Err(Error::Contract(format!("gradcheck eps must be > 0, got {}", cfg.eps)));
    }
    if analytic.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            store.len()
        )));
    }
    let first = loss_fn(store)?;
    let second = loss_fn(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut entries: Vec<(usize, usize)> = Vec::with_capacity(store.num_scalars());
    for (pi, p) in store.iter().enumerate() {
        if analytic[pi].shape() != p.value.shape() {
            return Err(Error::dim("grad_check", p.value.shape(), analytic[pi].shape()));
        }
        entries.extend((0..p.value.len()).map(|i| (pi, i)));
    }
    if let Some(limit) = cfg.max_entries {
        if limit < entries.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picked: Vec<usize> = sample(&mut rng, entries.len(), limit).into_vec();
            picked.sort_unstable();
            entries = picked.into_iter().map(|i| entries[i]).collect();
        }
    }

    let mut probe = store.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for &(pi, i) in &entries {
        let orig = probe.iter().nth(pi).map(|p| p.value.data()[i]).unwrap_or_default();
        set_entry(&mut probe, pi, i, orig + cfg.eps);
        let up = loss_fn(&probe)?;
        set_entry(&mut probe, pi, i, orig - cfg.eps);
        let down = loss_fn(&probe)?;
        set_entry(&mut probe, pi, i, orig);
        let numeric = (up - down) / (2.0 * cfg.eps);
        let a = analytic[pi].data()[i];
        let rel = relative_error(a, numeric, cfg.floor);
        if !rel.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck at {}[{i}]", names[pi])));
        }
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some(EntryError {
                param: names[pi].clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport {
        checked: entries.len(),
        max_rel_error: max_rel,
        worst,
        tol: cfg.tol,
        passed: max_rel <= cfg.tol,
    })
}

fn set_entry(store: &mut ParamStore, pi: usize, i: usize, v: f64) {
    if let Some(p) = store.iter_mut().nth(pi) {
        p.value.data_mut()[i] = v;
    }
}
