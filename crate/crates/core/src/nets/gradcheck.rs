/// Compare the analytic gradient returned by `loss_fn` at `params` with
/// central differences of step `step`. Returns the largest relative error,
/// using `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let (up, _) = loss_fn(&p);
        p[i] = orig - step;
        let (down, _) = loss_fn(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
