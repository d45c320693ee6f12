//! `stackelberg` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid input or failed validation, 2 solver or
//! regularity failure, 3 failed verification.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use stackelberg::augment::{cascade, Blocks};
use stackelberg::backward::solve_riccati_follower;
use stackelberg::equilibrium::{
    clamp_nonnegative, feedback, production_spec, scalar_bode_with, solve_game, value,
    EquilibriumSolution,
};
use stackelberg::montecarlo::{
    bvp_oracle, perturb_best_response_multi, pipeline_skeleton, sample_path, sampled_convexity,
    simulate, Functional, SimConfig, Verdict,
};
use stackelberg::{validate_spec, Error, GameSpec, TimeGrid};

use output::{matrix_rows, write_json, write_path_csv, write_table};

#[derive(Parser, Debug)]
#[command(
    name = "stackelberg",
    version,
    about = "Robust Stackelberg equilibria of stochastic LQ leader-follower games"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the game and write Riccati paths, offsets, gains and the value.
    Solve(SpecArgs),
    /// Monte Carlo simulation of the equilibrium closed loop.
    Simulate {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Also write per-path costs.
        #[arg(long)]
        per_path: bool,
    },
    /// Validation, value oracle, best-response suite, convexity samples and
    /// the boundary-value oracle.
    Verify {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Perturbation size.
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        /// Random directions per test.
        #[arg(long, default_value_t = 20)]
        directions: usize,
    },
    /// Two-producer market example.
    Example(ExampleArgs),
    /// Print the blocks of one cascade stage at one node as JSON.
    DumpBlocks {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_enum)]
        stage: StageName,
        /// Node index on the spec grid.
        #[arg(long, default_value_t = 0)]
        node: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct SpecArgs {
    /// Game specification (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Grid intervals; defaults to the spec's `N` (1000 when absent).
    #[arg(long = "grid-n")]
    grid_n: Option<usize>,
    /// Regularity margin.
    #[arg(long, default_value_t = 1e-8)]
    delta: f64,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Euler sub-steps per grid interval.
    #[arg(long, default_value_t = 1)]
    substeps: usize,
}

#[derive(Args, Debug, Clone)]
struct ExampleArgs {
    /// Purchase rate; the drift coefficient is `1 - a`.
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    a: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    c: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    q: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    g: f64,
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    r1: f64,
    #[arg(long, default_value_t = 0.25, allow_hyphen_values = true)]
    r2: f64,
    /// Horizon.
    #[arg(long = "T", default_value_t = 2.0)]
    horizon: f64,
    /// Grid intervals.
    #[arg(long = "N", default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed of the sample path along which strategies are reported.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    delta: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StageName {
    Hat,
    Check,
    Blackboard,
    Weights,
    Doublehat,
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn verification(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_solver_failure() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::input(format!("i/o: {e}"))
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Solve(args) => cmd_solve(&args),
        Command::Simulate {
            spec,
            sim,
            per_path,
        } => cmd_simulate(&spec, &sim, per_path),
        Command::Verify {
            spec,
            sim,
            eps,
            directions,
        } => cmd_verify(&spec, &sim, eps, directions),
        Command::Example(args) => cmd_example(&args),
        Command::DumpBlocks { spec, stage, node } => cmd_dump_blocks(&spec, stage, node),
    }
}

fn load_spec(args: &SpecArgs) -> std::result::Result<GameSpec, Failure> {
    let text = std::fs::read_to_string(&args.spec)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", args.spec.display())))?;
    let spec = GameSpec::from_json(&text)
        .map_err(|e| Failure::input(format!("{}: {e}", args.spec.display())))?;
    match args.grid_n {
        Some(n) if n != spec.grid.steps() => {
            Ok(spec.with_grid(TimeGrid::new(spec.grid.horizon(), n)?)?)
        }
        _ => Ok(spec),
    }
}

fn validated(args: &SpecArgs) -> std::result::Result<GameSpec, Failure> {
    let spec = load_spec(args)?;
    let report = validate_spec(&spec, args.delta);
    if !report.passed() {
        std::fs::create_dir_all(&args.out)?;
        write_json(
            &args.out.join("validation.json"),
            &serde_json::to_value(&report).expect("serializable"),
        )?;
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        return Err(Failure::input(format!(
            "validation failed: {}",
            names.join(", ")
        )));
    }
    Ok(spec)
}

/// Prints the resolved configuration and stores it next to the artifacts.
fn echo_config(out: &Path, config: Value) -> Outcome {
    std::fs::create_dir_all(out)?;
    println!("{}", serde_json::to_string(&config).expect("serializable"));
    write_json(&out.join("config.json"), &config)?;
    Ok(())
}

fn spec_config(args: &SpecArgs, spec: &GameSpec) -> Value {
    json!({
        "spec": args.spec.display().to_string(),
        "out": args.out.display().to_string(),
        "grid_n": spec.grid.steps(),
        "horizon": spec.grid.horizon(),
        "delta": args.delta,
        "n": spec.n,
        "m1": spec.m1,
        "m2": spec.m2,
    })
}

fn sim_config(sim: &SimArgs) -> std::result::Result<SimConfig, Failure> {
    Ok(SimConfig::new(sim.paths, sim.seed, sim.substeps)?)
}

fn gains_at(sol: &EquilibriumSolution, t: f64) -> Value {
    let st = &sol.strategies;
    let m = |p: &stackelberg::MatrixPath| matrix_rows(&p.sample(t).expect("t on the grid"));
    json!({
        "t": t,
        "u1_gain": m(&st.u1_gain),
        "u1_offset": m(&st.u1_offset),
        "u2_gain": m(&st.u2_gain),
        "u2_offset": m(&st.u2_offset),
        "f_gain": m(&st.f_gain),
        "f_offset": m(&st.f_offset),
        "f2_gain": m(&st.f2_gain),
        "f2_offset": m(&st.f2_offset),
    })
}

fn regularity(sol: &EquilibriumSolution) -> Value {
    Value::Array(
        sol.monitors()
            .into_iter()
            .map(|m| {
                json!({
                    "name": m.name,
                    "threshold": m.threshold,
                    "min": m.min(),
                    "respected": m.respected(),
                })
            })
            .collect(),
    )
}

fn cmd_solve(args: &SpecArgs) -> Outcome {
    let spec = validated(args)?;
    echo_config(
        &args.out,
        json!({ "command": "solve", "config": spec_config(args, &spec) }),
    )?;
    let sol = solve_game(&spec, args.delta)?;
    let out = &args.out;
    std::fs::write(out.join("spec.json"), spec.to_json())?;
    write_path_csv(&out.join("P.csv"), &[("P", &sol.p.p)])?;
    write_path_csv(&out.join("P1.csv"), &[("P1", &sol.p1.p)])?;
    write_path_csv(&out.join("Phat.csv"), &[("Phat", &sol.phat.p)])?;
    write_path_csv(&out.join("phihat.csv"), &[("phihat", &sol.phihat)])?;
    write_path_csv(&out.join("L.csv"), &[("L", &sol.lyapunov)])?;
    write_path_csv(&out.join("psi.csv"), &[("psi", &sol.psi)])?;
    let st = &sol.strategies;
    write_path_csv(
        &out.join("gains.csv"),
        &[
            ("u1_gain", &st.u1_gain),
            ("u1_offset", &st.u1_offset),
            ("u2_gain", &st.u2_gain),
            ("u2_offset", &st.u2_offset),
            ("f_gain", &st.f_gain),
            ("f_offset", &st.f_offset),
            ("f2_gain", &st.f2_gain),
            ("f2_offset", &st.f2_offset),
        ],
    )?;
    let horizon = spec.grid.horizon();
    let summary = json!({
        "value": value(&sol),
        "regularity": regularity(&sol),
        "gains_at": [gains_at(&sol, 0.0), gains_at(&sol, horizon / 2.0), gains_at(&sol, horizon)],
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{}",
        serde_json::to_string(&summary["value"]).expect("serializable")
    );
    Ok(())
}

fn cmd_simulate(args: &SpecArgs, sim: &SimArgs, per_path: bool) -> Outcome {
    let spec = validated(args)?;
    let cfg = sim_config(sim)?;
    echo_config(
        &args.out,
        json!({ "command": "simulate", "config": spec_config(args, &spec), "simulation": cfg }),
    )?;
    let sol = solve_game(&spec, args.delta)?;
    let res = simulate(&sol, &cfg)?;
    let v = value(&sol);
    let j = res.j_estimate();
    let summary = json!({
        "value": v,
        "j": j,
        "j_follower": res.j_follower_estimate(),
        "j_leader": res.j_leader_estimate(),
        "paths": cfg.paths,
        "diverged": res.diverged,
        "gap_in_stderr": if j.stderr > 0.0 { (j.mean - v).abs() / j.stderr } else { 0.0 },
    });
    write_json(&args.out.join("simulation.json"), &summary)?;
    if per_path {
        let rows = (0..res.j.len()).map(|i| {
            vec![
                i.to_string(),
                output::float(res.j[i]),
                output::float(res.j_follower[i]),
                output::float(res.j_leader[i]),
            ]
        });
        write_table(
            &args.out.join("paths.csv"),
            &["path", "j", "j_follower", "j_leader"],
            rows,
        )?;
    }
    println!("{}", serde_json::to_string(&summary).expect("serializable"));
    Ok(())
}

/// Oracle grid sizes; the gap should shrink at first order.
const ORACLE_GRIDS: [usize; 2] = [64, 128];

fn cmd_verify(args: &SpecArgs, sim: &SimArgs, eps: f64, directions: usize) -> Outcome {
    let spec = validated(args)?;
    let cfg = sim_config(sim)?;
    echo_config(
        &args.out,
        json!({
            "command": "verify",
            "config": spec_config(args, &spec),
            "simulation": cfg,
            "eps": eps,
            "directions": directions,
        }),
    )?;
    let validation = validate_spec(&spec, args.delta);
    let sol = solve_game(&spec, args.delta)?;
    let v = value(&sol);
    let mc = simulate(&sol, &cfg)?.j_estimate();
    let mc_ok = (mc.mean - v).abs() <= 3.0 * mc.stderr;

    let report = perturb_best_response_multi(&sol, &cfg, directions, &[eps, 0.0])?;
    let null_ok = report
        .rows
        .iter()
        .filter(|r| r.eps == 0.0)
        .all(|r| r.delta_j == 0.0);
    let mut shown = report.clone();
    shown.rows.retain(|r| r.eps == eps);
    std::fs::write(args.out.join("perturbation.csv"), shown.to_csv())?;
    let count = |v: Verdict| shown.rows.iter().filter(|r| r.verdict == v).count();
    let failed = count(Verdict::Fail);

    let convexity = sampled_convexity(&spec, directions, sim.seed, args.delta)?;
    let minima: serde_json::Map<String, Value> = Functional::ALL
        .iter()
        .map(|f| (f.name().to_string(), json!(convexity.minimum(*f))))
        .collect();

    let gaps = ORACLE_GRIDS
        .iter()
        .map(|&n| {
            Ok(bvp_oracle(&spec, n, args.delta)?
                .relative_gap(&pipeline_skeleton(&spec, n, args.delta)?))
        })
        .collect::<stackelberg::Result<Vec<f64>>>();
    // An indefinite follower weight may need the diffusion to stay regular, in
    // which case the noise-free skeleton has no equilibrium to compare.
    let (oracle_ok, oracle) = match gaps {
        Ok(gaps) => {
            let ratio = if gaps[0] > 0.0 {
                gaps[1] / gaps[0]
            } else {
                0.0
            };
            (
                gaps[0] <= 1e-12 || ratio <= 0.6,
                json!({ "applicable": true, "grids": ORACLE_GRIDS, "gaps": gaps, "ratio": ratio }),
            )
        }
        Err(e @ Error::Regularity { .. }) => (
            true,
            json!({ "applicable": false, "reason": e.to_string() }),
        ),
        Err(e) => return Err(e.into()),
    };

    let passed = mc_ok && null_ok && failed == 0 && convexity.all_positive() && oracle_ok;
    let summary = json!({
        "validation": validation,
        "value": v,
        "monte_carlo": { "estimate": mc, "within_3_stderr": mc_ok },
        "perturbation": {
            "eps": eps,
            "pass": count(Verdict::Pass),
            "fail": failed,
            "inconclusive": count(Verdict::Inconclusive),
            "null_test_exact": null_ok,
            "base_follower": report.base_follower,
            "base_leader": report.base_leader,
        },
        "convexity_minima": minima,
        "oracle": oracle,
        "passed": passed,
    });
    write_json(&args.out.join("verify.json"), &summary)?;
    println!(
        "{}",
        serde_json::to_string(&json!({ "passed": passed, "value": v })).expect("serializable")
    );
    if passed {
        Ok(())
    } else {
        Err(Failure::verification(
            "verification failed; see verify.json",
        ))
    }
}

fn cmd_example(args: &ExampleArgs) -> Outcome {
    echo_config(
        &args.out,
        json!({
            "command": "example",
            "a": args.a, "c": args.c, "q": args.q, "g": args.g,
            "r1": args.r1, "r2": args.r2,
            "T": args.horizon, "N": args.steps,
            "seed": args.seed, "delta": args.delta,
            "out": args.out.display().to_string(),
        }),
    )?;
    let p = scalar_bode_with(
        args.a,
        args.c,
        args.q,
        args.g,
        args.r1,
        args.horizon,
        args.steps,
        args.delta,
    )?;
    write_path_csv(&args.out.join("bode.csv"), &[("P", &p)])?;

    let spec = production_spec(
        args.a,
        args.c,
        args.q,
        args.g,
        args.r1,
        args.r2,
        args.horizon,
        args.steps,
    )?;
    std::fs::write(args.out.join("spec.json"), spec.to_json())?;
    let sol = solve_game(&spec, args.delta)?;
    let cfg = SimConfig::new(1, args.seed, 1)?;
    let (grid, states) = sample_path(&sol, &cfg, 0)?;
    let mut rows = Vec::with_capacity(states.len());
    for (k, x) in states.iter().enumerate() {
        let t = grid.time(k);
        let raw = feedback(&sol, x, t)?;
        let s = clamp_nonnegative(&raw);
        let f1 = &raw.f - &raw.f2;
        rows.push(vec![
            output::float(t),
            output::float(x[0]),
            output::float(s.u1[0]),
            output::float(s.u2[0]),
            output::float(raw.f[0]),
            output::float(raw.f2[0]),
            output::float(f1[0]),
        ]);
    }
    write_table(
        &args.out.join("strategies.csv"),
        &["t", "x", "u1", "u2", "f", "f2", "f1"],
        rows.into_iter(),
    )?;
    let summary = json!({
        "P0": p.node(0)[(0, 0)],
        "PT": p.node(args.steps)[(0, 0)],
        "value": value(&sol),
        "regularity": regularity(&sol),
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "{}",
        serde_json::to_string(&summary["P0"]).expect("serializable")
    );
    Ok(())
}

fn cmd_dump_blocks(args: &SpecArgs, stage: StageName, node: usize) -> Outcome {
    let spec = validated(args)?;
    if node > spec.grid.steps() {
        return Err(Failure::input(format!(
            "node {node} outside 0..={}",
            spec.grid.steps()
        )));
    }
    let p = solve_riccati_follower(&spec, args.delta)?.p;
    let t = spec.grid.time(node);
    let st = cascade(&spec, t, p.node(node), args.delta, node)?;
    let (tag, blocks) = match stage {
        StageName::Hat => (stackelberg::augment::HatBlocks::TAG, st.hat.named()),
        StageName::Check => (stackelberg::augment::CheckBlocks::TAG, st.check.named()),
        StageName::Blackboard => (
            stackelberg::augment::BlackboardBlocks::TAG,
            st.blackboard.named(),
        ),
        StageName::Weights => (
            stackelberg::augment::LeaderCostWeights::TAG,
            st.weights.named(),
        ),
        StageName::Doublehat => (
            stackelberg::augment::DoubleHatBlocks::TAG,
            st.doublehat.named(),
        ),
    };
    let map: serde_json::Map<String, Value> = blocks
        .into_iter()
        .map(|(name, m)| (name.to_string(), matrix_rows(&m)))
        .collect();
    let doc = json!({ "stage": tag, "node": node, "t": t, "blocks": map });
    std::fs::create_dir_all(&args.out)?;
    write_json(&args.out.join(format!("blocks_{tag}_{node}.json")), &doc)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).expect("serializable")
    );
    Ok(())
}
