use csgmcmc::clustering::{ClusterModel, Preprocessing};
use csgmcmc::experiment::BuiltinDataset;
use csgmcmc::hmm::PriorSpec;
use csgmcmc::sampler::{run_csgmcmc, SgldConfig, StepSchedule};
use csgmcmc::subchain::partition;

/// Fastest of three runs, in seconds per iteration.
fn seconds_per_iteration(l: usize, buffer: usize, draws: usize) -> f64 {
    let data = BuiltinDataset::Bd;
    let (_, y) = data.simulate(40_000, 1).unwrap();
    let part = partition(y.len(), l).unwrap().with_buffer(buffer);
    let clusters = ClusterModel::from_assignment(vec![0; part.n_windows()], 1, l, Preprocessing::None).unwrap();
    let cfg = SgldConfig {
        schedule: StepSchedule::constant(1e-7),
        inject_noise: true,
        n_iter: 30,
        n_steps: 1,
        seed: 3,
        transition_scale: 1.0,
    };
    (0..3)
        .map(|_| {
            let trace =
                run_csgmcmc(&y, &cfg, &part, &clusters, &[draws], &PriorSpec::Flat, &data.true_params()).unwrap();
            trace.records.last().unwrap().elapsed_seconds / cfg.n_iter as f64
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn iteration_cost_is_linear_in_evaluated_observations() {
    let draws = 40;
    let cells = [(5, 10), (11, 40), (21, 160), (11, 640), (41, 1280)];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (l, b) in cells {
        let work = (draws * (l + 2 * b)) as f64;
        xs.push(work.ln());
        ys.push(seconds_per_iteration(l, b, draws).ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    assert!((0.7..=1.3).contains(&slope), "log-log slope {slope}");
}
