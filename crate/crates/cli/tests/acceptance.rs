//! Release gate: one test per shipped guarantee, each printing a single
//! `PASS criterion N: ...` or `FAIL criterion N: ...` line (visible under
//! `--nocapture`) before asserting. The ignored `full_protocol_headline`
//! test re-checks the two statistics that need the complete benchmark; run
//! it with `cargo test --test acceptance -- --ignored --nocapture`.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltgraph::autodiff::{Tape, Var};
use voltgraph::bench::{
    evaluate, netlist_text, sample_cases, sample_configs, BenchConfig, CaseFlag, CaseRow,
    EvalReport, TrainingSampler,
};
use voltgraph::dpc::{
    dpc_loss, loss_gradients, rollout, train, Scenario, ScenarioSampler, TrainConfig,
};
use voltgraph::gnn::{backbone, Aggregator, GnnConfig, GnnParameters};
use voltgraph::netlist::{parse_netlist, permute_graph, ConverterGraph};
use voltgraph::ocp::{objective_on_tape, replay, solve, write_trajectory_csv, OcpConfig};
use voltgraph::plant::{
    step, ControlInput, Conventions, Disturbance, PlantParameters, PlantState,
};
use voltgraph::policy::PolicyParameters;

fn check(criterion: &str, pass: bool, detail: String) {
    println!(
        "{} criterion {criterion}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion}: {detail}");
}

/// Random connected netlist over all component kinds; a component path
/// through fresh nets with the last component closing a loop.
fn random_netlist(rng: &mut ChaCha8Rng, components: usize) -> String {
    let letters = ['V', 'S', 'D', 'L', 'C', 'R'];
    let mut lines = Vec::new();
    let mut nets: Vec<String> = vec!["0".to_string()];
    for k in 0..components {
        let letter = letters[rng.random_range(0..letters.len())];
        let (a, b) = if k + 1 < components || k == 0 {
            let fresh = format!("n{}", k + 1);
            nets.push(fresh.clone());
            (nets[nets.len() - 2].clone(), fresh)
        } else {
            let i = rng.random_range(0..nets.len());
            let j = (i + 1 + rng.random_range(0..nets.len() - 1)) % nets.len();
            (nets[i].clone(), nets[j].clone())
        };
        let value = match letter {
            'V' => format!(" {}", rng.random_range(1.0..100.0)),
            'L' | 'C' | 'R' => format!(" {}", rng.random_range(1e-6..1e-2)),
            _ => String::new(),
        };
        lines.push(format!("{letter}{} {a} {b}{value}", k + 1));
    }
    lines.join("\n") + "\n"
}

fn random_features(
    rng: &mut ChaCha8Rng,
    graph: &ConverterGraph<f64>,
    config: &GnnConfig,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut row = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let x = (0..graph.node_count()).map(|_| row(config.d_x)).collect();
    let e = (0..graph.edges.len()).map(|_| row(config.d_e)).collect();
    let z = row(config.d_z);
    (x, e, z)
}

fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

// ---------------------------------------------------------------------
// Criterion 1: permutation equivariance of the backbone.
// ---------------------------------------------------------------------

#[test]
fn criterion_1_backbone_is_permutation_equivariant() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let configs = [
        GnnConfig::default(),
        GnnConfig {
            layers: 1,
            d_h: 9,
            d_m: 7,
            d_g: 4,
            mlp_hidden: 11,
            aggregator: Aggregator::Max,
            ..GnnConfig::default()
        },
        GnnConfig {
            layers: 3,
            d_h: 6,
            d_m: 6,
            d_g: 3,
            mlp_hidden: 8,
            aggregator: Aggregator::Sum,
            ..GnnConfig::default()
        },
    ];
    let mut worst: f64 = 0.0;
    for round in 0..100u64 {
        let config = configs[(round % 3) as usize];
        let size = 3 + rng.random_range(0..10);
        let text = random_netlist(&mut rng, size);
        let graph: ConverterGraph<f64> = parse_netlist(&text).unwrap();
        let params = GnnParameters::<f64>::init(config, 1000 + round);
        let (x, e, z) = random_features(&mut rng, &graph, &config);
        let base = backbone(&graph, &x, &e, &z, &params).unwrap();

        let n_c = graph.components.len();
        let component_perm = random_permutation(&mut rng, n_c);
        let net_perm = random_permutation(&mut rng, graph.nets.len());
        let permuted = permute_graph(&graph, &component_perm, &net_perm).unwrap();
        // Components keep the low indices, nets follow; edge slots do not
        // move, only their endpoints are renamed.
        let new_index = |v: usize| {
            if v < n_c {
                component_perm[v]
            } else {
                n_c + net_perm[v - n_c]
            }
        };
        let mut px = vec![Vec::new(); graph.node_count()];
        for (v, row) in x.iter().enumerate() {
            px[new_index(v)] = row.clone();
        }
        let out = backbone(&permuted, &px, &e, &z, &params).unwrap();

        for v in 0..graph.node_count() {
            for (a, b) in base.h[v].iter().zip(&out.h[new_index(v)]) {
                worst = worst.max((a - b).abs());
            }
        }
        for (a, b) in base.h_global.iter().zip(&out.h_global) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "1",
        worst < 1e-10 && elapsed < 10.0,
        format!(
            "equivariance over 100 graphs (3-12 components, permuted within \
             partitions): max deviation {worst:.2e} (< 1e-10) in {elapsed:.2} s (< 10 s)"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 2: gradients against central finite differences.
// ---------------------------------------------------------------------

/// Smooth random expression tree over a handful of leaf variables,
/// evaluable both on the tape and in plain f64.
enum Expr {
    Leaf(usize),
    Neg(Box<Expr>),
    Tanh(Box<Expr>),
    Sigmoid(Box<Expr>),
    /// exp(tanh(x)/2): an exp with bounded argument.
    BoundedExp(Box<Expr>),
    /// ln(x^2 + 1): a log with argument at least one.
    SafeLn(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    /// a / (b^2 + 2): a division with denominator at least two.
    SafeDiv(Box<Expr>, Box<Expr>),
}

impl Expr {
    fn random(rng: &mut ChaCha8Rng, depth: usize, leaves: usize) -> Expr {
        if depth == 0 || rng.random_range(0..5) == 0 {
            return Expr::Leaf(rng.random_range(0..leaves));
        }
        let mut sub = || Box::new(Expr::random(rng, depth - 1, leaves));
        match rng.random_range(0..9) {
            0 => Expr::Neg(sub()),
            1 => Expr::Tanh(sub()),
            2 => Expr::Sigmoid(sub()),
            3 => Expr::BoundedExp(sub()),
            4 => Expr::SafeLn(sub()),
            5 => Expr::Add(sub(), sub()),
            6 => Expr::Sub(sub(), sub()),
            7 => Expr::Mul(sub(), sub()),
            _ => Expr::SafeDiv(sub(), sub()),
        }
    }

    fn eval_f64(&self, vals: &[f64]) -> f64 {
        match self {
            Expr::Leaf(i) => vals[*i],
            Expr::Neg(a) => -a.eval_f64(vals),
            Expr::Tanh(a) => a.eval_f64(vals).tanh(),
            Expr::Sigmoid(a) => {
                let x = a.eval_f64(vals);
                1.0 / (1.0 + (-x).exp())
            }
            Expr::BoundedExp(a) => (a.eval_f64(vals).tanh() * 0.5).exp(),
            Expr::SafeLn(a) => {
                let x = a.eval_f64(vals);
                (x * x + 1.0).ln()
            }
            Expr::Add(a, b) => a.eval_f64(vals) + b.eval_f64(vals),
            Expr::Sub(a, b) => a.eval_f64(vals) - b.eval_f64(vals),
            Expr::Mul(a, b) => a.eval_f64(vals) * b.eval_f64(vals),
            Expr::SafeDiv(a, b) => {
                let d = b.eval_f64(vals);
                a.eval_f64(vals) / (d * d + 2.0)
            }
        }
    }

    fn eval_tape<'t>(&self, tape: &'t Tape<f64>, vars: &[Var<'t, f64>]) -> Var<'t, f64> {
        match self {
            Expr::Leaf(i) => vars[*i],
            Expr::Neg(a) => -a.eval_tape(tape, vars),
            Expr::Tanh(a) => a.eval_tape(tape, vars).tanh(),
            Expr::Sigmoid(a) => a.eval_tape(tape, vars).sigmoid(),
            Expr::BoundedExp(a) => (a.eval_tape(tape, vars).tanh() * 0.5).exp(),
            Expr::SafeLn(a) => {
                let x = a.eval_tape(tape, vars);
                (x * x + 1.0).ln().expect("argument >= 1")
            }
            Expr::Add(a, b) => a.eval_tape(tape, vars) + b.eval_tape(tape, vars),
            Expr::Sub(a, b) => a.eval_tape(tape, vars) - b.eval_tape(tape, vars),
            Expr::Mul(a, b) => a.eval_tape(tape, vars) * b.eval_tape(tape, vars),
            Expr::SafeDiv(a, b) => {
                let d = b.eval_tape(tape, vars);
                a.eval_tape(tape, vars) / (d * d + 2.0)
            }
        }
    }
}

/// Relative disagreement with the usual guard against vanishing
/// denominators: tiny gradients are compared on the scale of the largest
/// gradient entry instead of their own.
fn relative_error(ad: f64, fd: f64, grad_scale: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6 * grad_scale).max(1e-9)
}

fn expression_tree_suite(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let leaves = rng.random_range(3..7);
        let expr = Expr::random(rng, 5, leaves);
        let vals: Vec<f64> = (0..leaves).map(|_| rng.random_range(-2.0..2.0)).collect();

        let tape = Tape::new();
        let vars: Vec<Var<f64>> = vals.iter().map(|&v| tape.scalar(v)).collect();
        let out = expr.eval_tape(&tape, &vars);
        assert!(
            (out.value() - expr.eval_f64(&vals)).abs() <= 1e-12 * out.value().abs().max(1.0),
            "tape and plain evaluation disagree"
        );
        let grads = tape.gradients(out).unwrap();
        let ad: Vec<f64> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let scale = ad.iter().fold(0.0f64, |m, g| m.max(g.abs()));

        for i in 0..leaves {
            let h = 1e-5 * vals[i].abs().max(1.0);
            let mut plus = vals.clone();
            plus[i] += h;
            let mut minus = vals.clone();
            minus[i] -= h;
            let fd = (expr.eval_f64(&plus) - expr.eval_f64(&minus)) / (2.0 * h);
            worst = worst.max(relative_error(ad[i], fd, scale));
        }
    }
    worst
}

fn backbone_gradient_suite(rng: &mut ChaCha8Rng) -> f64 {
    let config = GnnConfig::default();
    let text = random_netlist(rng, 6);
    let graph: ConverterGraph<f64> = parse_netlist(&text).unwrap();
    let (x, e, z) = random_features(rng, &graph, &config);
    let weights: Vec<f64> = (0..config.d_g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = GnnParameters::<f64>::init(config, 2024);

    // Scalar objective: a fixed random projection of the readout.
    let objective = |p: &GnnParameters<f64>| -> f64 {
        let out = backbone(&graph, &x, &e, &z, p).unwrap();
        out.h_global.iter().zip(&weights).map(|(h, w)| h * w).sum()
    };

    let tape = Tape::new();
    let bound = params.bind(&tape);
    let xs: Vec<_> = x.iter().map(|row| tape.vector(row)).collect();
    let es: Vec<_> = e.iter().map(|row| tape.vector(row)).collect();
    let zv = tape.vector(&z);
    let (_, h_global) =
        voltgraph::gnn::backbone_on_tape(&tape, &graph, &xs, &es, zv, &bound).unwrap();
    let mut out = tape.scalar(0.0);
    for (j, &w) in weights.iter().enumerate() {
        out = out + h_global.component(j) * w;
    }
    let grads = tape.gradients(out).unwrap();
    let mut ad = Vec::new();
    bound.push_gradients(&grads, &mut ad);

    let flat = params.to_flat();
    assert_eq!(ad.len(), flat.len());
    let scale = ad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst: f64 = 0.0;
    for i in (0..flat.len()).step_by(7) {
        let h = 1e-6 * flat[i].abs().max(1.0);
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let fd = (objective(&GnnParameters::from_flat(config, &plus).unwrap())
            - objective(&GnnParameters::from_flat(config, &minus).unwrap()))
            / (2.0 * h);
        worst = worst.max(relative_error(ad[i], fd, scale));
    }
    worst
}

fn dpc_gradient_suite() -> f64 {
    let config = GnnConfig::default();
    let sampler = TrainingSampler::new(BenchConfig::smoke(), Conventions::default());
    let batch: Vec<Scenario<f64>> = (0..2)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + k);
            sampler.sample(&mut rng, 5)
        })
        .collect();
    let params = PolicyParameters::<f64>::init(config, 31);
    let lambda = 10.0;

    let result = loss_gradients(&batch, &params, lambda).unwrap();
    let flat = params.to_flat();
    assert_eq!(result.gradient.len(), flat.len());
    let scale = result.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));

    let mut worst: f64 = 0.0;
    for i in (0..flat.len()).step_by(11) {
        let h = 1e-5 * flat[i].abs().max(1.0);
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let fd = (dpc_loss(&batch, &PolicyParameters::from_flat(config, &plus).unwrap(), lambda)
            .unwrap()
            - dpc_loss(
                &batch,
                &PolicyParameters::from_flat(config, &minus).unwrap(),
                lambda,
            )
            .unwrap())
            / (2.0 * h);
        worst = worst.max(relative_error(result.gradient[i], fd, scale));
    }
    worst
}

fn shooting_gradient_suite(rng: &mut ChaCha8Rng) -> f64 {
    let sampler = TrainingSampler::new(BenchConfig::smoke(), Conventions::default());
    let mut srng = ChaCha8Rng::seed_from_u64(77);
    let scenario: Scenario<f64> = sampler.sample(&mut srng, 20);
    let lambda = OcpConfig::default().lambda;
    let logits: Vec<f64> = (0..scenario.horizon)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();

    let objective = |logits: &[f64]| -> f64 {
        let duties: Vec<f64> = logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
        replay(&scenario, &duties).unwrap().objective(lambda)
    };

    let tape = Tape::new();
    let vars: Vec<Var<f64>> = logits.iter().map(|&l| tape.scalar(l)).collect();
    let [cost, _, _] = objective_on_tape(&tape, &scenario, &vars, lambda).unwrap();
    assert!(
        (cost.value() - objective(&logits)).abs() <= 1e-9 * cost.value().abs().max(1.0),
        "tape objective and replayed objective disagree"
    );
    let grads = tape.gradients(cost).unwrap();
    let ad: Vec<f64> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let scale = ad.iter().fold(0.0f64, |m, g| m.max(g.abs()));

    let mut worst: f64 = 0.0;
    for i in 0..logits.len() {
        let h = 1e-5;
        let mut plus = logits.clone();
        plus[i] += h;
        let mut minus = logits.clone();
        minus[i] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        worst = worst.max(relative_error(ad[i], fd, scale));
    }
    worst
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let trees = expression_tree_suite(&mut rng);
    let net = backbone_gradient_suite(&mut rng);
    let loss = dpc_gradient_suite();
    let shooting = shooting_gradient_suite(&mut rng);
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "2",
        trees < 1e-5 && net < 1e-4 && loss < 1e-4 && shooting < 1e-4 && elapsed < 60.0,
        format!(
            "max relative gradient error: expression trees {trees:.2e} (< 1e-5), \
             backbone {net:.2e}, training loss {loss:.2e}, shooting {shooting:.2e} \
             (all < 1e-4) in {elapsed:.1} s (< 60 s)"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 3: plant integrator properties.
// ---------------------------------------------------------------------

fn random_plant(rng: &mut ChaCha8Rng, bench: &BenchConfig, stable_only: bool) -> PlantParameters<f64> {
    let conv = Conventions::default();
    let log_uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| -> f64 {
        (rng.random_range(lo.ln()..=hi.ln())).exp()
    };
    loop {
        let p = PlantParameters {
            v_in: bench.v_in,
            inductance: log_uniform(rng, bench.l_range),
            capacitance: log_uniform(rng, bench.c_range),
            r_load: log_uniform(rng, bench.r_range),
        };
        if !stable_only || p.rk4_growth(p.time_step(&conv)) <= 1.0 {
            return p;
        }
    }
}

#[test]
fn criterion_3_plant_oracles_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let full = BenchConfig::default();
    let conv = Conventions::default();
    let disturbance = Disturbance::default();

    // Equilibria are fixed points of the integrator regardless of step
    // size or stiffness; keep the distribution unfiltered here.
    let mut worst_residual: f64 = 0.0;
    for _ in 0..20 {
        let p = random_plant(&mut rng, &full, false);
        let duty = rng.random_range(0.1..0.9);
        let eq = p.equilibrium(duty);
        let next = step(&eq, &ControlInput { duty }, &disturbance, &p, p.time_step(&conv))
            .unwrap();
        let scale = eq.inductor_current.abs().max(eq.capacitor_voltage.abs());
        let residual = ((next.inductor_current - eq.inductor_current).abs()
            + (next.capacitor_voltage - eq.capacitor_voltage).abs())
            / scale;
        worst_residual = worst_residual.max(residual);
    }

    // Local truncation error of one step must shrink as h^5: successive
    // halvings against a 64-substep reference, least-squares slope.
    let mut worst_slope = f64::INFINITY;
    for _ in 0..5 {
        let p = random_plant(&mut rng, &full, true);
        let dt = p.time_step(&conv);
        if dt >= conv.dt_max || dt <= conv.dt_min {
            continue; // clamped step no longer scales with the plant
        }
        let duty = 0.7;
        let y0 = PlantState {
            inductor_current: p.equilibrium(0.3).inductor_current * 1.2,
            capacitor_voltage: p.equilibrium(0.3).capacitor_voltage * 0.8,
        };
        let advance = |h: f64, substeps: usize| -> PlantState<f64> {
            let mut y = y0;
            for _ in 0..substeps {
                y = step(
                    &y,
                    &ControlInput { duty },
                    &disturbance,
                    &p,
                    h / substeps as f64,
                )
                .unwrap();
            }
            y
        };
        let mut points = Vec::new();
        for k in 0..4 {
            let h = dt / f64::powi(2.0, k);
            let one = advance(h, 1);
            let reference = advance(h, 64);
            let err = (one.inductor_current - reference.inductor_current).abs()
                + (one.capacitor_voltage - reference.capacitor_voltage).abs();
            points.push((h.ln(), err.ln()));
        }
        let n = points.len() as f64;
        let (mx, my) = points
            .iter()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
        let slope = points
            .iter()
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum::<f64>();
        worst_slope = worst_slope.min(slope);
    }

    // Zero duty disconnects the source; stored energy can only decay.
    let mut energy_ok = true;
    for _ in 0..20 {
        let p = random_plant(&mut rng, &full, true);
        let dt = p.time_step(&conv);
        let mut y = p.equilibrium(0.6);
        let energy = |s: &PlantState<f64>| {
            0.5 * p.inductance * s.inductor_current.powi(2)
                + 0.5 * p.capacitance * s.capacitor_voltage.powi(2)
        };
        let mut prev = energy(&y);
        for _ in 0..1000 {
            y = step(&y, &ControlInput { duty: 0.0 }, &disturbance, &p, dt).unwrap();
            let e = energy(&y);
            if e > prev * (1.0 + 1e-12) {
                energy_ok = false;
            }
            prev = e;
        }
    }

    check(
        "3",
        worst_residual < 1e-9 && worst_slope >= 4.5 && energy_ok,
        format!(
            "equilibrium residual {worst_residual:.2e} (< 1e-9 relative), \
             refinement slope {worst_slope:.2f} (>= 4.5), energy non-increasing \
             over 1000 zero-duty steps on 20 configurations: {energy_ok}"
        ),
    );
}

// ---------------------------------------------------------------------
// Criteria 4-6 share one trained smoke policy and its benchmark report.
// ---------------------------------------------------------------------

/// Training budget for the continuous-integration smoke policy; sized so
/// the whole smoke protocol stays inside the 15 minute budget.
const SMOKE_TRAIN_STEPS: usize = 280;

struct SmokeFixture {
    outcome: Result<(PolicyParameters<f64>, EvalReport), String>,
    train_seconds: f64,
    bench_seconds: f64,
}

fn smoke() -> &'static SmokeFixture {
    static FIXTURE: OnceLock<SmokeFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let bench = BenchConfig::smoke();
        let conventions = Conventions::default();
        let train_config = TrainConfig {
            steps: SMOKE_TRAIN_STEPS,
            ..TrainConfig::default()
        };
        let sampler = TrainingSampler::new(bench, conventions);

        let started = Instant::now();
        let mut log = Vec::new();
        let trained = train::<f64, _>(GnnConfig::default(), &train_config, &sampler, &mut log, |_| {});
        let train_seconds = started.elapsed().as_secs_f64();

        let (outcome, bench_seconds) = match trained {
            Ok(params) => {
                let started = Instant::now();
                let report = evaluate(&params, &bench, &OcpConfig::default(), &conventions);
                let bench_seconds = started.elapsed().as_secs_f64();
                (
                    report
                        .map(|r| (params, r))
                        .map_err(|e| format!("smoke benchmark failed: {e}")),
                    bench_seconds,
                )
            }
            Err(e) => (Err(format!("smoke training failed: {e}")), 0.0),
        };
        SmokeFixture {
            outcome,
            train_seconds,
            bench_seconds,
        }
    })
}

/// Did the baseline match or beat the policy on this case? Rows where the
/// policy rollout blew up count in the baseline's favor; rows without a
/// trustworthy baseline are skipped.
fn oc_not_worse(row: &CaseRow) -> Option<bool> {
    if row.flags.contains(&CaseFlag::PolicyFailure) {
        return Some(true);
    }
    if row.flags.contains(&CaseFlag::OcFailure) || row.flags.contains(&CaseFlag::Degenerate) {
        return None;
    }
    // Clean rows and flagged baseline failures compare directly; the
    // latter are exactly the cases where the policy beat the baseline.
    Some(row.oc_cost <= row.policy_cost * (1.0 + 1e-9))
}

fn baseline_wins(report: &EvalReport) -> (usize, usize) {
    let mut wins = 0;
    let mut comparable = 0;
    for row in &report.rows {
        if let Some(won) = oc_not_worse(row) {
            comparable += 1;
            wins += won as usize;
        }
    }
    (wins, comparable)
}

#[test]
fn criterion_4_baseline_reaches_grid_optimum_and_bounds_the_policy() {
    let start = Instant::now();
    // (a) Shooting against brute force on tiny horizons.
    let sampler = TrainingSampler::new(BenchConfig::smoke(), Conventions::default());
    let ocp = OcpConfig::default();
    let mut worst_excess: f64 = 0.0;
    for k in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + k);
        let scenario: Scenario<f64> = sampler.sample(&mut rng, 3);
        let solution = solve(&scenario, &ocp).unwrap();

        let levels: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let mut best = f64::INFINITY;
        let mut best_duties = [0.0; 3];
        for &a in &levels {
            for &b in &levels {
                for &c in &levels {
                    let cost = replay(&scenario, &[a, b, c]).unwrap().objective(ocp.lambda);
                    if cost < best {
                        best = cost;
                        best_duties = [a, b, c];
                    }
                }
            }
        }
        // Grid resolution gap: steepest single-coordinate move of one
        // grid spacing around the winning vertex.
        let mut resolution_gap = 0.0f64;
        for dim in 0..3 {
            for delta in [-0.05, 0.05] {
                let mut d = best_duties;
                d[dim] = (d[dim] + delta).clamp(0.0, 1.0);
                let cost = replay(&scenario, &d).unwrap().objective(ocp.lambda);
                resolution_gap = resolution_gap.max((cost - best).abs());
            }
        }
        worst_excess = worst_excess.max(solution.cost - (best + resolution_gap));
    }

    // (b) The baseline bounds the policy from below across the smoke
    // benchmark; the full benchmark is re-checked by the ignored test.
    let fixture = smoke();
    let (wins, comparable) = match &fixture.outcome {
        Ok((_, report)) => baseline_wins(report),
        Err(e) => {
            check("4", false, e.clone());
            return;
        }
    };
    let fraction = wins as f64 / comparable as f64;
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "4",
        worst_excess <= 1e-12 && fraction >= 0.95,
        format!(
            "shooting within grid resolution of brute force on 10 tiny scenarios \
             (worst excess {worst_excess:.2e}); baseline at or below the policy on \
             {wins}/{comparable} comparable smoke cases ({:.1}% >= 95%); {elapsed:.1} s",
            fraction * 100.0
        ),
    );
}

#[test]
fn criterion_5_smoke_protocol_reaches_median_gap_bar() {
    let fixture = smoke();
    let report = match &fixture.outcome {
        Ok((_, report)) => report,
        Err(e) => {
            check("5", false, e.clone());
            return;
        }
    };
    let total = fixture.train_seconds + fixture.bench_seconds;
    let median = report.stats.as_ref().map(|s| s.median);
    let pass = median.is_some_and(|m| m <= 0.25) && total <= 900.0;
    check(
        "5",
        pass,
        format!(
            "smoke protocol (20 configs x 5 cases, narrowed ranges): median \
             relative gap {} (<= 0.25) over {} clean of {} cases \
             ({} policy / {} baseline-quality / {} solver failures, {} degenerate); \
             train {:.0} s + bench {:.0} s = {:.0} s (<= 900 s, {} train steps)",
            median.map_or("undefined".to_string(), |m| format!("{m:.4}")),
            report.counts.included,
            report.counts.cases,
            report.counts.policy_failures,
            report.counts.baseline_failures,
            report.counts.oc_failures,
            report.counts.degenerate,
            fixture.train_seconds,
            fixture.bench_seconds,
            total,
            SMOKE_TRAIN_STEPS,
        ),
    );
}

#[test]
fn criterion_6_policy_settles_on_dumped_trajectories() {
    let fixture = smoke();
    let params = match &fixture.outcome {
        Ok((params, _)) => params,
        Err(e) => {
            check("6", false, e.clone());
            return;
        }
    };
    let bench = BenchConfig::smoke();
    let conventions = Conventions::default();
    let configs = sample_configs::<f64>(&bench);
    let out_dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("trajectories");
    std::fs::create_dir_all(&out_dir).unwrap();

    let mut details = Vec::new();
    let mut pass = true;
    for sampled in configs.iter().take(2) {
        let graph: ConverterGraph<f64> = parse_netlist(&sampled.netlist).unwrap();
        let case = sample_cases(&sampled.plant, 1, 9000 + sampled.id as u64, 0.1, &conventions)
            .pop()
            .unwrap();
        let scenario = Scenario::from_graph(
            graph,
            case.task,
            case.initial_state,
            200,
            &conventions,
        )
        .unwrap();

        let policy_trajectory = rollout(&scenario, params).unwrap();
        let oc = solve(&scenario, &OcpConfig::default()).unwrap();
        let oc_trajectory = replay(&scenario, &oc.duty_sequence).unwrap();
        for (name, trajectory) in [
            ("policy", &policy_trajectory),
            ("baseline", &oc_trajectory),
        ] {
            let path = out_dir.join(format!("config{}_{name}.csv", sampled.id));
            let mut file = std::fs::File::create(&path).unwrap();
            write_trajectory_csv(&mut file, trajectory).unwrap();
        }

        // Mean absolute voltage error over the trailing fifth of the
        // horizon, the settled window after the reference step.
        let window = &policy_trajectory.states[160..];
        let mean_error = window
            .iter()
            .map(|s| (s.capacitor_voltage - scenario.task.v_ref).abs())
            .sum::<f64>()
            / window.len() as f64;
        let bound = 0.05 * scenario.plant.v_in;
        pass &= mean_error < bound;
        details.push(format!(
            "config {} (v_ref {:.1} V): terminal mean |v_c - v_ref| = {:.3} V (< {:.1} V)",
            sampled.id, scenario.task.v_ref, mean_error, bound
        ));
    }
    check(
        "6",
        pass,
        format!(
            "{}; trajectories dumped under {}",
            details.join("; "),
            out_dir.display()
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 7: bitwise determinism through the binary.
// ---------------------------------------------------------------------

#[test]
fn criterion_7_identical_seeds_reproduce_artifacts_bitwise() {
    let dir = tempfile::TempDir::new().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        "[gnn]\nlayers = 1\nd_h = 5\nd_m = 5\nd_g = 3\nmlp_hidden = 6\n\n\
         [train]\nsteps = 3\nbatch_size = 2\nhorizon = 6\n\n\
         [ocp]\nmax_iterations = 120\n\n\
         [bench]\nn_configs = 2\ncases_per_config = 2\n\
         l_range = [1e-5, 1e-3]\nc_range = [1e-6, 1e-4]\nr_range = [1.0, 100.0]\nhorizon = 6\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let output = std::process::Command::new(env!("CARGO_BIN_EXE_voltgraph"))
            .args(args)
            .output()
            .expect("binary runs");
        assert!(
            output.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    };

    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    for round in 0..2 {
        let train_dir = dir.path().join(format!("train{round}"));
        run(&[
            "--threads",
            "1",
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--out-dir",
            train_dir.to_str().unwrap(),
        ]);
        checkpoints.push(std::fs::read(train_dir.join("policy.ckpt")).unwrap());

        let bench_dir = dir.path().join(format!("bench{round}"));
        run(&[
            "--threads",
            "1",
            "bench",
            "--config",
            config_path.to_str().unwrap(),
            "--checkpoint",
            train_dir.join("policy.ckpt").to_str().unwrap(),
            "--out-dir",
            bench_dir.to_str().unwrap(),
        ]);
        reports.push(std::fs::read(bench_dir.join("report.csv")).unwrap());
        summaries.push(std::fs::read(bench_dir.join("summary.json")).unwrap());
    }
    let pass = checkpoints[0] == checkpoints[1]
        && reports[0] == reports[1]
        && summaries[0] == summaries[1];
    check(
        "7",
        pass,
        format!(
            "two identically seeded runs with --threads 1: checkpoints {} \
             ({} bytes), reports {}, summaries {}",
            if checkpoints[0] == checkpoints[1] { "identical" } else { "differ" },
            checkpoints[0].len(),
            if reports[0] == reports[1] { "identical" } else { "differ" },
            if summaries[0] == summaries[1] { "identical" } else { "differ" },
        ),
    );
}

// ---------------------------------------------------------------------
// Full headline protocol; ~1.5 h on one desktop core, so ignored by
// default and run explicitly before a release.
// ---------------------------------------------------------------------

#[test]
#[ignore]
fn full_protocol_headline() {
    let start = Instant::now();
    let bench = BenchConfig::default();
    let conventions = Conventions::default();
    let train_config = TrainConfig::default();
    let sampler = TrainingSampler::new(bench, conventions);

    let mut log = Vec::new();
    let params = train::<f64, _>(
        GnnConfig::default(),
        &train_config,
        &sampler,
        &mut log,
        |row| {
            if (row.step + 1) % 100 == 0 {
                println!(
                    "train step {}/{}: loss {:.3e}",
                    row.step + 1,
                    train_config.steps,
                    row.mean_loss
                );
            }
        },
    )
    .expect("default training converges");
    let train_seconds = start.elapsed().as_secs_f64();
    println!("trained {} steps in {train_seconds:.0} s", train_config.steps);

    let bench_started = Instant::now();
    let report = evaluate(&params, &bench, &OcpConfig::default(), &conventions).unwrap();
    let bench_seconds = bench_started.elapsed().as_secs_f64();
    let total = start.elapsed().as_secs_f64();

    let median = report.stats.as_ref().map(|s| s.median);
    let gaps: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.flags.is_empty())
        .filter_map(|r| r.relative_gap)
        .collect();
    let below_one = gaps.iter().filter(|g| **g < 1.0).count();
    let below_fraction = below_one as f64 / gaps.len().max(1) as f64;
    let (wins, comparable) = baseline_wins(&report);
    let win_fraction = wins as f64 / comparable.max(1) as f64;

    check(
        "4 (full bench)",
        win_fraction >= 0.95,
        format!(
            "baseline at or below the policy on {wins}/{comparable} comparable \
             cases ({:.1}% >= 95%)",
            win_fraction * 100.0
        ),
    );
    check(
        "5 (full protocol)",
        median.is_some_and(|m| m <= 0.35) && below_fraction >= 0.90 && total <= 7200.0,
        format!(
            "100 configs x 10 cases: median relative gap {} (<= 0.35), {below_one}/{} \
             evaluated gaps below 100% ({:.1}% >= 90%), {} of {} cases evaluated \
             ({} policy failures on integrator-unstable plants); train {train_seconds:.0} s \
             + bench {bench_seconds:.0} s = {total:.0} s (<= 7200 s)",
            median.map_or("undefined".to_string(), |m| format!("{m:.4}")),
            gaps.len(),
            below_fraction * 100.0,
            report.counts.included,
            report.counts.cases,
            report.counts.policy_failures,
        ),
    );
}
