use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    pub value: f64,
    /// Set when the trace has no variation; `value` is then the trace length.
    pub degenerate: bool,
}

/// Effective sample size with Geyer's initial positive sequence truncation,
/// clamped to `(0, n]`.
pub fn effective_sample_size(trace: &[f64]) -> Ess {
    let n = trace.len();
    if n == 0 {
        return Ess {
            value: 0.0,
            degenerate: true,
        };
    }
    let nf = n as f64;
    let mean = trace.iter().sum::<f64>() / nf;
    let centered: Vec<f64> = trace.iter().map(|x| x - mean).collect();
    let c0 = centered.iter().map(|x| x * x).sum::<f64>() / nf;
    if !(c0 > 0.0) || n < 3 {
        return Ess {
            value: nf,
            degenerate: c0 <= 0.0,
        };
    }
    let rho = |lag: usize| -> f64 {
        let s: f64 = centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum();
        s / nf / c0
    };
    // Sum of autocorrelation pairs while the pair sums stay positive.
    let mut sum = 0.0;
    let mut t = 0;
    while 2 * t + 1 < n {
        let pair = if t == 0 { 1.0 + rho(1) } else { rho(2 * t) + rho(2 * t + 1) };
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        t += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1e-12);
    Ess {
        value: (nf / tau).min(nf),
        degenerate: false,
    }
}
