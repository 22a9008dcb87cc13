use super::{Method, OptimizeError, Scorer, TraceEntry};
use crate::rng::{CounterRng, Purpose};
use crate::Scalar;

pub(crate) struct RunOutcome {
    pub best_theta: Vec<f64>,
    pub best_value: f64,
    pub history: Vec<f64>,
    pub trace: Vec<TraceEntry>,
    pub evaluations: usize,
}

struct Tracker {
    best_theta: Vec<f64>,
    best_value: f64,
    history: Vec<f64>,
    trace: Vec<TraceEntry>,
    evaluations: usize,
    penalty: f64,
}

impl Tracker {
    fn new(theta: Vec<f64>, penalty: f64) -> Self {
        Self {
            best_theta: theta,
            best_value: f64::NEG_INFINITY,
            history: Vec::new(),
            trace: Vec::new(),
            evaluations: 0,
            penalty,
        }
    }

    fn offer(&mut self, theta: &[f64], score: Option<f64>) -> f64 {
        self.evaluations += 1;
        let v = score.unwrap_or(self.penalty);
        if v > self.best_value {
            self.best_value = v;
            self.best_theta = theta.to_vec();
        }
        v
    }

    fn close_iteration(&mut self, iteration: usize, current_value: f64, current: &[f64]) {
        self.history.push(self.best_value);
        self.trace.push(TraceEntry {
            iteration,
            best_value: self.best_value,
            current_value,
            theta: current.to_vec(),
        });
    }

    fn finish(self) -> RunOutcome {
        RunOutcome {
            best_theta: self.best_theta,
            best_value: self.best_value,
            history: self.history,
            trace: self.trace,
            evaluations: self.evaluations,
        }
    }
}

pub(crate) fn run<S: Scalar>(
    scorer: &Scorer<'_, S>,
    method: &Method,
    theta0: Vec<f64>,
    penalty: f64,
    search_seed: u64,
) -> Result<RunOutcome, OptimizeError> {
    let mut tr = Tracker::new(theta0.clone(), penalty);
    let s0 = scorer.score(&theta0)?;
    let v0 = tr.offer(&theta0, s0);
    tr.close_iteration(0, v0, &theta0);
    match *method {
        Method::CrossEntropy {
            population,
            elite_frac,
            iters,
            init_std,
        } => cross_entropy(
            scorer,
            &mut tr,
            theta0,
            population,
            elite_frac,
            iters,
            init_std,
            search_seed,
        )?,
        Method::NelderMead {
            iters,
            simplex_scale,
        } => nelder_mead(scorer, &mut tr, theta0, iters, simplex_scale)?,
        Method::Grid {
            resolution,
            lower,
            upper,
        } => grid(scorer, &mut tr, theta0.len(), resolution, lower, upper)?,
        Method::FdGradient {
            iters,
            step,
            fd_step,
        } => fd_gradient(scorer, &mut tr, theta0, iters, step, fd_step)?,
    }
    Ok(tr.finish())
}

#[allow(clippy::too_many_arguments)]
fn cross_entropy<S: Scalar>(
    scorer: &Scorer<'_, S>,
    tr: &mut Tracker,
    mut mean: Vec<f64>,
    population: usize,
    elite_frac: f64,
    iters: usize,
    init_std: f64,
    seed: u64,
) -> Result<(), OptimizeError> {
    let dim = mean.len();
    let mut std = vec![init_std; dim];
    let n_elite = ((population as f64 * elite_frac).ceil() as usize).max(2);
    let rng = CounterRng::new(seed);
    let mut stream = rng.stream(Purpose::Search, 0);
    let mut z = vec![0.0; dim];
    for it in 1..=iters {
        let mut cands: Vec<Vec<f64>> = Vec::with_capacity(population + 1);
        cands.push(mean.clone());
        for _ in 0..population {
            stream.fill_normals(&mut z);
            cands.push(
                mean.iter()
                    .zip(&std)
                    .zip(&z)
                    .map(|((m, s), z)| m + s * z)
                    .collect(),
            );
        }
        let scores = scorer.score_batch(&cands)?;
        if scores[1..].iter().all(Option::is_none) {
            return Err(OptimizeError::AllCandidatesBlewUp { iteration: it });
        }
        let vals: Vec<f64> = cands
            .iter()
            .zip(&scores)
            .map(|(c, s)| tr.offer(c, *s))
            .collect();
        let centre_value = vals[0];
        let mut order: Vec<usize> = (1..cands.len()).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let elite = &order[..n_elite.min(order.len())];
        let ne = elite.len() as f64;
        for j in 0..dim {
            let m = elite.iter().map(|&i| cands[i][j]).sum::<f64>() / ne;
            let v = elite
                .iter()
                .map(|&i| (cands[i][j] - m).powi(2))
                .sum::<f64>()
                / ne;
            mean[j] = m;
            // Keep a small floor so the search does not freeze early.
            std[j] = v.sqrt().max(1e-3 * init_std);
        }
        tr.close_iteration(it, centre_value, &mean);
    }
    let last = scorer.score(&mean)?;
    tr.offer(&mean, last);
    if let Some(h) = tr.history.last_mut() {
        *h = tr.best_value;
    }
    if let Some(e) = tr.trace.last_mut() {
        e.best_value = tr.best_value;
    }
    Ok(())
}

fn nelder_mead<S: Scalar>(
    scorer: &Scorer<'_, S>,
    tr: &mut Tracker,
    theta0: Vec<f64>,
    iters: usize,
    scale: f64,
) -> Result<(), OptimizeError> {
    let dim = theta0.len();
    let mut simplex = vec![theta0.clone()];
    for j in 0..dim {
        let mut v = theta0.clone();
        v[j] += scale;
        simplex.push(v);
    }
    let scores = scorer.score_batch(&simplex[1..])?;
    let mut vals = vec![tr.best_value];
    for (v, s) in simplex[1..].iter().zip(scores) {
        vals.push(tr.offer(v, s));
    }
    let eval = |tr: &mut Tracker, x: &[f64]| -> Result<f64, OptimizeError> {
        let s = scorer.score(x)?;
        Ok(tr.offer(x, s))
    };
    for it in 1..=iters {
        // Maximization: sort descending.
        let mut idx: Vec<usize> = (0..=dim).collect();
        idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let worst = dim;
        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..worst].iter().map(|v| v[j]).sum::<f64>() / dim as f64)
            .collect();
        let along = |c: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(m, w)| m + c * (m - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = eval(tr, &xr)?;
        if fr > vals[0] {
            let xe = along(2.0);
            let fe = eval(tr, &xe)?;
            if fe > fr {
                simplex[worst] = xe;
                vals[worst] = fe;
            } else {
                simplex[worst] = xr;
                vals[worst] = fr;
            }
        } else if fr > vals[worst - 1] {
            simplex[worst] = xr;
            vals[worst] = fr;
        } else {
            let xc = if fr > vals[worst] {
                along(0.5)
            } else {
                along(-0.5)
            };
            let fc = eval(tr, &xc)?;
            if fc > vals[worst].max(fr) {
                simplex[worst] = xc;
                vals[worst] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=dim {
                    simplex[i] = best
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, x)| b + 0.5 * (x - b))
                        .collect();
                }
                let s = scorer.score_batch(&simplex[1..])?;
                for (i, s) in (1..=dim).zip(s) {
                    vals[i] = tr.offer(&simplex[i], s);
                }
            }
        }
        let top = (0..=dim)
            .max_by(|&a, &b| vals[a].total_cmp(&vals[b]))
            .unwrap_or(0);
        let (cv, ct) = (vals[top], simplex[top].clone());
        tr.close_iteration(it, cv, &ct);
    }
    Ok(())
}

fn grid<S: Scalar>(
    scorer: &Scorer<'_, S>,
    tr: &mut Tracker,
    dim: usize,
    resolution: usize,
    lower: f64,
    upper: f64,
) -> Result<(), OptimizeError> {
    let total = resolution
        .checked_pow(dim as u32)
        .filter(|&t| t <= 1_000_000)
        .ok_or_else(|| OptimizeError::Config("grid has too many points".into()))?;
    let h = (upper - lower) / (resolution - 1) as f64;
    let points: Vec<Vec<f64>> = (0..total)
        .map(|mut flat| {
            let mut v = vec![0.0; dim];
            for slot in v.iter_mut().rev() {
                *slot = lower + h * (flat % resolution) as f64;
                flat /= resolution;
            }
            v
        })
        .collect();
    // One iteration per slab of the slowest coordinate.
    let slab = total / resolution;
    for (it, chunk) in points.chunks(slab.max(1)).enumerate() {
        let scores = scorer.score_batch(chunk)?;
        let mut slab_best = (f64::NEG_INFINITY, &chunk[0]);
        for (p, s) in chunk.iter().zip(scores) {
            let v = tr.offer(p, s);
            if v > slab_best.0 {
                slab_best = (v, p);
            }
        }
        let (v, p) = (slab_best.0, slab_best.1.clone());
        tr.close_iteration(it + 1, v, &p);
    }
    Ok(())
}

fn fd_gradient<S: Scalar>(
    scorer: &Scorer<'_, S>,
    tr: &mut Tracker,
    mut theta: Vec<f64>,
    iters: usize,
    mut step: f64,
    fd_step: f64,
) -> Result<(), OptimizeError> {
    let dim = theta.len();
    let mut value = tr.best_value;
    for it in 1..=iters {
        let mut probes = Vec::with_capacity(2 * dim);
        for j in 0..dim {
            for sgn in [1.0, -1.0] {
                let mut v = theta.clone();
                v[j] += sgn * fd_step;
                probes.push(v);
            }
        }
        let scores = scorer.score_batch(&probes)?;
        let vals: Vec<f64> = probes
            .iter()
            .zip(scores)
            .map(|(p, s)| tr.offer(p, s))
            .collect();
        let grad: Vec<f64> = (0..dim)
            .map(|j| (vals[2 * j] - vals[2 * j + 1]) / (2.0 * fd_step))
            .collect();
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !gnorm.is_finite() || gnorm == 0.0 {
            tr.close_iteration(it, value, &theta);
            continue;
        }
        let mut accepted = false;
        for _ in 0..20 {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
            let s = scorer.score(&cand)?;
            let v = tr.offer(&cand, s);
            if v > value {
                theta = cand;
                value = v;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        tr.close_iteration(it, value, &theta);
        if !accepted {
            break;
        }
    }
    Ok(())
}
