//! Central-difference gradient checking, independent of the tape's backward
//! pass. Used by model tests to validate analytic gradients end to end.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::graph::Mat;
use super::layers::ParamBank;

/// Outcome of probing a set of parameter entries.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Probe `entries_per_param` randomly chosen entries of every tensor in the
/// bank with central differences of `loss_fn` and compare against `analytic`
/// (aligned with bank order). Entries where both estimates are below
/// `abs_floor` are counted but not scored, since the relative error of two
/// zeros is noise.
pub fn check_gradients<F>(
    bank: &ParamBank,
    analytic: &[Mat],
    loss_fn: F,
    entries_per_param: usize,
    h: f64,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&ParamBank) -> f64,
{
    assert_eq!(analytic.len(), bank.len());
    let abs_floor = 1e-10;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: String::new() };

    for pi in 0..bank.len() {
        let tensor = bank.tensor(pi);
        let total = tensor.len();
        let mut flats: Vec<usize> = (0..total).collect();
        flats.shuffle(&mut rng);
        flats.truncate(entries_per_param.min(total));
        let cols = tensor.ncols();
        for flat in flats {
            let (r, c) = (flat / cols, flat % cols);
            let mut plus = bank.clone();
            plus.tensor_mut(pi)[[r, c]] += h;
            let mut minus = bank.clone();
            minus.tensor_mut(pi)[[r, c]] -= h;
            let fd = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h);
            let an = analytic[pi][[r, c]];
            report.checked += 1;
            if fd.abs() < abs_floor && an.abs() < abs_floor {
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(abs_floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!(
                    "{}[{},{}]: fd={:.6e} analytic={:.6e}",
                    bank.name(pi),
                    r,
                    c,
                    fd,
                    an
                );
            }
        }
    }
    report
}

/// Panic with a diagnostic if any probed entry exceeds `rel_tol`.
pub fn assert_gradients_match<F>(
    bank: &ParamBank,
    analytic: &[Mat],
    loss_fn: F,
    entries_per_param: usize,
    rel_tol: f64,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&ParamBank) -> f64,
{
    let report = check_gradients(bank, analytic, loss_fn, entries_per_param, 1e-5, seed);
    assert!(
        report.max_rel_err <= rel_tol,
        "gradient check failed: max rel err {:.3e} > {:.1e} at {} ({} entries probed)",
        report.max_rel_err,
        rel_tol,
        report.worst,
        report.checked
    );
    report
}
