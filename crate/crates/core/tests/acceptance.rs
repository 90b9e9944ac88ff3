//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Criteria 1–4 and 10 are deterministic and fail the run; the training
//! criteria 5–9 are statistical and only reported.

use std::process::ExitCode;
use std::time::Instant;

use cdnet::dst::{run_dst, DstConfig};
use cdnet::dynamics::{dare_residual, rollout, solve_dare, spectral_radius, MasModel};
use cdnet::experiments::{
    cumulative_regret, run_scenario, MetricsRecord, RunOptions, ScenarioConfig, ScenarioSummary,
};
use cdnet::graph::{
    aggregate_route_noise, all_simple_routes, compute_routes, route_selection_fixture, AgentId, LinkNoise,
    NetworkGraph,
};
use cdnet::learner::nn::{Activation, DenseNet, Gradients};
use cdnet::learner::CommSettings;
use cdnet::messaging::{debias, EmaChannel, EmaConfig, Estimation, RefinedGlobalState, TimeShiftBuffer};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RICCATI_TOL: f64 = 1e-9;
const GRADIENT_REL_TOL: f64 = 1e-4;
const CONVERGENCE_EPISODES: usize = 2000;
const CONVERGENCE_SEEDS: u64 = 5;
const PLATEAU_TOL: f64 = 0.05;
const COST_BAND: (f64, f64) = (9.0, 17.0);
const RADIUS_BAND: (f64, f64) = (0.6, 0.85);
const BAND_EPISODES: usize = 1000;
const REGRET_FLAT_TOL: f64 = 0.05;
const REGRET_BAND: (f64, f64) = (10.0, 1e3);
const LAMBDA_EPISODES: usize = 1500;
const BASELINE_EPISODES: usize = 1500;
const BASELINE_OPT_TOL: f64 = 1.25;
const DST_OPT_TOL: f64 = 1.10;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    deterministic: bool,
    detail: String,
}

fn report(o: &Outcome) {
    println!(
        "criterion {:>2} {:<32} {} ({}) {}",
        o.id,
        o.name,
        if o.pass { "PASS" } else { "FAIL" },
        if o.deterministic { "asserted" } else { "reported" },
        o.detail
    );
}

fn riccati() -> Outcome {
    let start = Instant::now();
    let scalar = MasModel::scalar_agents(DMatrix::from_element(1, 1, 1.0)).unwrap();
    let sol = solve_dare(&scalar, 1e-14, 10_000).unwrap();
    let p_err = (sol.p[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs();
    // 0.6180340 is (√5 − 1)/2 rounded to seven digits; compare with the
    // closed form itself.
    let k_err = (sol.gain.matrix()[(0, 0)] - (5f64.sqrt() - 1.0) / 2.0).abs();
    let mut pass = p_err < RICCATI_TOL && k_err < RICCATI_TOL;
    let mut worst_res: f64 = 0.0;
    let mut worst_rho: f64 = 0.0;
    for name in ["A5", "A6", "A8"] {
        let model = MasModel::preset(name).unwrap();
        let sol = solve_dare(&model, 1e-13, 100_000).unwrap();
        let res = dare_residual(&model, &sol.p).unwrap();
        let rho = spectral_radius(&model.closed_loop(&sol.gain).unwrap()).unwrap();
        worst_res = worst_res.max(res);
        worst_rho = worst_rho.max(rho);
        pass &= res < RICCATI_TOL && rho < 1.0;
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 1.0;
    Outcome {
        id: 1,
        name: "Riccati oracle exactness",
        pass,
        deterministic: true,
        detail: format!(
            "|P-phi|={p_err:.1e} |K-(sqrt5-1)/2|={k_err:.1e} K={:.7} max residual={worst_res:.1e} max rho={worst_rho:.3} in {secs:.3}s",
            sol.gain.matrix()[(0, 0)]
        ),
    }
}

fn random_connected(rng: &mut ChaCha8Rng) -> NetworkGraph {
    let n = rng.gen_range(2..=7);
    let mut pairs = std::collections::BTreeSet::new();
    for v in 2..=n {
        let u = rng.gen_range(1..v);
        pairs.insert((u, v));
    }
    for _ in 0..rng.gen_range(0..=n) {
        let (u, v) = (rng.gen_range(1..=n), rng.gen_range(1..=n));
        if u != v {
            pairs.insert((u.min(v), u.max(v)));
        }
    }
    let edges: Vec<_> = pairs
        .into_iter()
        .map(|(u, v)| (u, v, LinkNoise::new(rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.1)).unwrap()))
        .collect();
    NetworkGraph::new(n, edges).unwrap()
}

fn routing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut pairs = 0;
    for _ in 0..100 {
        let g = random_connected(&mut rng);
        for lambda in [0.0, 1.0, 100.0] {
            let t = compute_routes(&g, lambda).unwrap();
            for r in 1..=g.node_count() {
                for s in 1..=g.node_count() {
                    let best = all_simple_routes(&g, AgentId(r), AgentId(s))
                        .iter()
                        .map(|p| p.cost(lambda))
                        .fold(f64::INFINITY, f64::min);
                    let route = t.route(AgentId(r), AgentId(s));
                    let (mu, s2) = aggregate_route_noise(&route.links);
                    pairs += 1;
                    let noise_ok = (mu - route.mu_total).abs() < 1e-14 && (s2 - route.sigma2_total).abs() < 1e-14;
                    if route.cost(lambda) != best || !noise_ok {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    let fixture = route_selection_fixture();
    let mut switches = Vec::new();
    let mut fixture_ok = true;
    for (lambda, hops, cost) in [(1.0, 1, 1.05), (100.0, 2, 5.0), (500.0, 3, 14.0)] {
        let t = compute_routes(&fixture, lambda).unwrap();
        let r = t.route(AgentId(1), AgentId(4));
        let c = t.cost(AgentId(1), AgentId(4));
        fixture_ok &= r.hops() == hops && (c - cost).abs() < 1e-12;
        switches.push(format!("{}hop/{c:.2}", r.hops()));
    }
    Outcome {
        id: 2,
        name: "routing equivalence",
        pass: mismatches == 0 && fixture_ok,
        deterministic: true,
        detail: format!("{mismatches}/{pairs} mismatches, fixture {}", switches.join(" -> ")),
    }
}

fn message_passing() -> Outcome {
    let y_bar = debias(&[1.98], -0.01);
    let mut ch = EmaChannel::with_previous(EmaConfig::default(), 0.03, vec![1.95]);
    let refined = ch.ema_refine(&y_bar, 0.2)[0];
    let numeric_ok = (y_bar[0] - 1.99).abs() < 1e-12 && (refined - 1.958).abs() < 1e-12;

    let state = |values: &[f64]| RefinedGlobalState {
        owner: AgentId(1),
        time: 0,
        values: values.to_vec(),
    };
    let pre = [
        [0.118, 0.166, 0.694, 1.893, 0.388, 1.247],
        [0.120, 0.142, 0.633, 1.958, 0.320, 1.386],
        [0.115, 0.128, 0.601, 1.912, 0.309, 1.531],
    ];
    let mut b = TimeShiftBuffer::new(AgentId(1), vec![0, 0, 1, 1, 1, 0], 1, 2).unwrap();
    for s in &pre {
        b.push(&state(s)).unwrap();
    }
    let mut popped = Vec::new();
    while b.ready() > 0 {
        popped.push(b.pop_reconstructed().unwrap());
    }
    let listing_ok = popped.len() == 3
        && !popped[0].1
        && popped[1] == (vec![0.118, 0.166, 0.633, 1.958, 0.320, 1.247], true)
        && popped[2] == (vec![0.120, 0.142, 0.601, 1.912, 0.309, 1.386], true);
    Outcome {
        id: 3,
        name: "message-passing worked examples",
        pass: numeric_ok && listing_ok,
        deterministic: true,
        detail: format!("debias={:.4} ema={refined:.4} shifted listing match={listing_ok}", y_bar[0]),
    }
}

/// Largest relative error between backprop and central differences of the
/// loss `Σ w ⊙ f(x)` over parameters and inputs.
fn gradient_error(net: &DenseNet, input: &[f64], batch: usize, weights: &[f64]) -> f64 {
    let loss = |n: &DenseNet, x: &[f64]| -> f64 {
        let out = n.forward(x, batch).unwrap();
        out.output().iter().zip(weights).map(|(o, w)| o * w).sum()
    };
    let cache = net.forward(input, batch).unwrap();
    let mut grads = Gradients::zeros_like(net);
    let grad_in = net.backward(&cache, weights, Some(&mut grads));
    let analytic = grads.flat();
    let base = net.flat_params();
    let h = 1e-6;
    let rel = |fd: f64, an: f64| {
        let scale = fd.abs().max(an.abs());
        if scale < 1e-6 {
            0.0
        } else {
            (fd - an).abs() / scale
        }
    };
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] += h;
        probe.set_flat_params(&v).unwrap();
        let up = loss(&probe, input);
        v[i] -= 2.0 * h;
        probe.set_flat_params(&v).unwrap();
        let down = loss(&probe, input);
        worst = worst.max(rel((up - down) / (2.0 * h), analytic[i]));
    }
    for i in 0..input.len() {
        let mut x = input.to_vec();
        x[i] += h;
        let up = loss(net, &x);
        x[i] -= 2.0 * h;
        let down = loss(net, &x);
        worst = worst.max(rel((up - down) / (2.0 * h), grad_in[i]));
    }
    worst
}

fn gradients() -> Outcome {
    use Activation::{Linear, Relu, Tanh};
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..20 {
        let l = rng.gen_range(1..=8);
        let hidden = rng.gen_range(2..=10);
        let g = rng.gen_range(1..=8);
        let batch = rng.gen_range(1..=4);
        let nets = [
            DenseNet::new(&[l, hidden, hidden], &[Relu, Relu], None, &mut rng),
            DenseNet::new(&[hidden, hidden], &[Relu], None, &mut rng),
            DenseNet::new(&[hidden, hidden, g], &[Relu, Tanh], Some(0.5), &mut rng),
            DenseNet::new(&[hidden + g, hidden, 1], &[Relu, Linear], Some(0.5), &mut rng),
        ];
        for net in &nets {
            let input: Vec<f64> = (0..net.input_dim() * batch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let weights: Vec<f64> = (0..net.output_dim() * batch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            worst = worst.max(gradient_error(net, &input, batch, &weights));
            checked += 1;
        }
    }
    Outcome {
        id: 4,
        name: "gradient correctness",
        pass: worst < GRADIENT_REL_TOL,
        deterministic: true,
        detail: format!("{checked} networks over 20 configurations, worst rel err {worst:.2e}"),
    }
}

fn scenario(body: &str) -> ScenarioConfig {
    ScenarioConfig::from_toml(body).unwrap()
}

fn run(cfg: &ScenarioConfig) -> (ScenarioSummary, Vec<MetricsRecord>) {
    let opts = RunOptions {
        dry_run: true,
        ..RunOptions::default()
    };
    let out = run_scenario(cfg, &opts).unwrap();
    (out.summary, out.records)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn tail(records: &[MetricsRecord], seed: u64, n: usize) -> Vec<&MetricsRecord> {
    let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.seed == seed).collect();
    rows[rows.len().saturating_sub(n)..].to_vec()
}

fn kept_mean(rows: &[&MetricsRecord]) -> f64 {
    mean(rows.iter().filter(|r| !r.blown_up).map(|r| r.cost))
}

fn convergence_and_regret() -> (Outcome, Outcome) {
    let seeds: Vec<String> = (0..CONVERGENCE_SEEDS).map(|s| s.to_string()).collect();
    let cfg = scenario(&format!(
        r#"
scenario_id = "convergence"
seeds = [{}]
[model]
preset = "A6"
[network]
topology = "ring"
lambda = 500
noise = {{ kind = "sampled" }}
[train]
episodes = {CONVERGENCE_EPISODES}
"#,
        seeds.join(", ")
    ));
    let (summary, records) = run(&cfg);
    let mut plateau_ok = 0;
    let mut band_ok = 0;
    let mut stable = 0;
    let mut tails = Vec::new();
    let mut regret_lines = Vec::new();
    let mut regret_ok = true;
    for (seed, rep) in (0..CONVERGENCE_SEEDS).zip(&summary.seeds) {
        let last200 = kept_mean(&tail(&records, seed, 200));
        let last500 = kept_mean(&tail(&records, seed, 500));
        plateau_ok += usize::from((last200 - last500).abs() <= PLATEAU_TOL * last500);
        band_ok += usize::from((COST_BAND.0..=COST_BAND.1).contains(&last500));
        stable += usize::from(rep.spectral_radius < 1.0);
        tails.push(format!("{last500:.2}/rho {:.3}", rep.spectral_radius));

        let kept: Vec<f64> = records
            .iter()
            .filter(|r| r.seed == seed && !r.blown_up)
            .map(|r| r.cost)
            .collect();
        let regret = cumulative_regret(&kept);
        let total = regret.last().copied().unwrap_or(0.0);
        let before = regret.len().checked_sub(101).map_or(0.0, |i| regret[i]);
        let monotone = regret.windows(2).all(|w| w[1] >= w[0]);
        let flat = total - before < REGRET_FLAT_TOL * total;
        let band = (REGRET_BAND.0..=REGRET_BAND.1).contains(&total);
        regret_ok &= monotone && flat && band;
        let excess: Vec<f64> = tail(&records, seed, 500)
            .iter()
            .filter(|r| !r.blown_up)
            .map(|r| r.cost - r.best_so_far)
            .collect();
        regret_lines.push(format!(
            "{total:.1}(+{:.2}, excess/episode {:.2})",
            total - before,
            mean(excess.into_iter())
        ));
    }
    let decreasing: Vec<f64> = (0..50).map(|i| 100.0 - i as f64).collect();
    let zero_ok = cumulative_regret(&decreasing).iter().all(|&r| r == 0.0);
    let convergence = Outcome {
        id: 5,
        name: "training convergence",
        pass: plateau_ok == CONVERGENCE_SEEDS as usize && band_ok == CONVERGENCE_SEEDS as usize && stable >= 4,
        deterministic: false,
        detail: format!(
            "plateau {plateau_ok}/{n}, last-500 mean in [{}, {}] {band_ok}/{n}, stable {stable}/{n}; per seed {}",
            COST_BAND.0,
            COST_BAND.1,
            tails.join(", "),
            n = CONVERGENCE_SEEDS
        ),
    };
    let regret = Outcome {
        id: 7,
        name: "regret behaviour",
        pass: regret_ok && zero_ok,
        deterministic: false,
        detail: format!(
            "ring regret total(+last 100): {}; band [{}, {}]; decreasing costs give zero regret: {zero_ok}",
            regret_lines.join(", "),
            REGRET_BAND.0,
            REGRET_BAND.1
        ),
    };
    (convergence, regret)
}

fn spectral_band() -> Outcome {
    let mut radii = Vec::new();
    for topology in ["line", "tree", "ring"] {
        let cfg = scenario(&format!(
            r#"
scenario_id = "band-{topology}"
[model]
preset = "A5"
[network]
topology = "{topology}"
lambda = 100
noise = {{ kind = "sampled" }}
[train]
episodes = {BAND_EPISODES}
"#
        ));
        let (summary, _) = run(&cfg);
        radii.push((topology, summary.seeds[0].spectral_radius));
    }
    Outcome {
        id: 6,
        name: "spectral-radius band",
        pass: radii.iter().all(|(_, r)| (RADIUS_BAND.0..=RADIUS_BAND.1).contains(r)),
        deterministic: false,
        detail: format!(
            "band [{}, {}]: {}",
            RADIUS_BAND.0,
            RADIUS_BAND.1,
            radii.iter().map(|(t, r)| format!("{t} {r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn lambda_ordering() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for l in [5, 6, 8] {
        let mut costs = Vec::new();
        for lambda in [1, 500] {
            let cfg = scenario(&format!(
                r#"
scenario_id = "lambda-{l}-{lambda}"
[model]
preset = "A{l}"
[network]
topology = "degree3"
lambda = {lambda}
noise = {{ kind = "sampled" }}
[train]
episodes = {LAMBDA_EPISODES}
"#
            ));
            costs.push(run(&cfg).0.mean_cost);
        }
        pass &= costs[1] > costs[0];
        lines.push(format!("L={l}: {:.2} vs {:.2}", costs[0], costs[1]));
    }
    Outcome {
        id: 8,
        name: "lambda monotonicity",
        pass,
        deterministic: false,
        detail: format!("last-1000 mean at lambda 1 vs 500: {}", lines.join(", ")),
    }
}

fn baseline_ordering() -> Outcome {
    let ideal = r#"noise = { kind = "none" }
delays = false"#;
    let imperfect = r#"noise = { kind = "fixed", mu = 0.0, sigma2 = 0.02 }
delays = true"#;
    let cost = |method: &str, network: &str| {
        let cfg = scenario(&format!(
            r#"
scenario_id = "baseline-{method}"
[model]
preset = "A6"
[network]
topology = "ring"
lambda = 100
{network}
[train]
episodes = {BASELINE_EPISODES}
[method]
name = "{method}"
"#
        ));
        run(&cfg).0.mean_eval_cost
    };
    let opt = cost("opt", ideal);
    let (cd_ideal, cd_noisy) = (cost("cdnet", ideal), cost("cdnet", imperfect));
    let (dst_ideal, dst_noisy) = (cost("dst", ideal), cost("dst", imperfect));
    let cd_deg = cd_noisy / cd_ideal - 1.0;
    let dst_deg = dst_noisy / dst_ideal - 1.0;
    let pass = cd_deg < dst_deg && cd_ideal <= BASELINE_OPT_TOL * opt && dst_ideal <= BASELINE_OPT_TOL * opt;
    Outcome {
        id: 9,
        name: "baseline ordering",
        pass,
        deterministic: false,
        detail: format!(
            "OPT {opt:.3}; CDNet {cd_ideal:.3} -> {cd_noisy:.3} ({:+.1}%); DST {dst_ideal:.3} -> {dst_noisy:.3} ({:+.1}%)",
            100.0 * cd_deg,
            100.0 * dst_deg
        ),
    }
}

fn dst_sanity() -> Outcome {
    let model = MasModel::preset("A6").unwrap();
    let graph = NetworkGraph::from_pairs(6, (1..=6).map(|i| (i, i % 6 + 1))).unwrap();
    let table = compute_routes(&graph, 1.0).unwrap();
    let comm = CommSettings {
        with_delays: false,
        estimation: Estimation::Raw,
        ..CommSettings::default()
    };
    let out = run_dst(&model, &table, &comm, &DstConfig::default()).unwrap();
    let opt = solve_dare(&model, 1e-12, 100_000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut dst_cost, mut opt_cost) = (0.0, 0.0);
    for _ in 0..50 {
        let x0 = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        dst_cost += rollout(&model, &out.gains, &x0, 100, 1e3).unwrap().cost;
        opt_cost += rollout(&model, &opt.gain, &x0, 100, 1e3).unwrap().cost;
    }
    let ratio = dst_cost / opt_cost;
    Outcome {
        id: 10,
        name: "DST sanity",
        pass: ratio <= DST_OPT_TOL,
        deterministic: true,
        detail: format!("DST/OPT cost over 50 random states = {ratio:.4}"),
    }
}

fn main() -> ExitCode {
    // Cargo passes harness flags such as `--nocapture`; only a listing
    // request needs handling.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let mut outcomes = Vec::new();
    for f in [riccati, routing, message_passing, gradients, dst_sanity] {
        let o = f();
        report(&o);
        outcomes.push(o);
    }
    let (convergence, regret) = convergence_and_regret();
    report(&convergence);
    report(&regret);
    outcomes.extend([convergence, regret]);
    for f in [spectral_band, lambda_ordering, baseline_ordering] {
        let o = f();
        report(&o);
        outcomes.push(o);
    }
    outcomes.sort_by_key(|o| o.id);
    println!("summary ({:.0}s):", start.elapsed().as_secs_f64());
    for o in &outcomes {
        report(o);
    }
    if outcomes.iter().any(|o| o.deterministic && !o.pass) {
        println!("acceptance: deterministic criterion failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
