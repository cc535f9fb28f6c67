use std::fmt::Write as _;
use std::path::Path;

use geoilqr_core::charts::ChartId;
use geoilqr_core::exec::{with_jobs, Execution};
use geoilqr_core::io::{demos_from_csv, pose_row, read_demos, write_atomic, DemoSetFile, SCHEMA_VERSION};
use geoilqr_core::kinematics::forward_kinematics;
use geoilqr_core::phase::{build_phase_model_with, fit_time_gmm, Demonstration, PhaseModel, TimeGmm};
use geoilqr_core::planner::{solve, ChartStrategy, PlanResult};
use geoilqr_core::tasks::{
    evaluate_trial, generate_demos, plan_problem, prepare_with_charts, run_prepared, sample_initial_states,
    PreparedTask, TaskKind, TrialReport,
};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, ExperimentConfig};
use crate::svg;
use crate::{Cli, Command, FitArgs, PlanArgs};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_FIT: u8 = 3;
pub const EXIT_PLAN: u8 = 4;
pub const EXIT_EVALUATE: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

fn fail(code: u8) -> impl Fn(String) -> CliError {
    move |message| CliError { code, message }
}

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => config::load(path).map_err(fail(EXIT_CONFIG))?,
        None => ExperimentConfig::defaults(TaskKind::Grasp2D),
    };
    config::resolve_seed(&mut config, cli.seed).map_err(fail(EXIT_CONFIG))?;
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    let exec = if cli.jobs == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let seed_flag = cli.seed;
    let explicit_config = cli.config.is_some();
    with_jobs(cli.jobs, move || match cli.command {
        Command::DemoGen => demo_gen(&config),
        Command::Fit(args) => fit(&config, &args, exec),
        Command::Plan(args) => plan(config, explicit_config, seed_flag, &args),
        Command::Evaluate => evaluate(&config, exec),
    })
}

fn write(path: &Path, contents: &str, code: u8) -> CliResult<()> {
    write_atomic(path, contents.as_bytes()).map_err(|e| CliError {
        code,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn pretty(value: &impl Serialize) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    text
}

/// Comment lines that open every CSV output.
fn csv_preamble(config: &ExperimentConfig) -> String {
    format!(
        "# schema_version={SCHEMA_VERSION}\n# config={}\n",
        serde_json::to_string(&config.to_value()).expect("config serializes")
    )
}

fn demo_gen(config: &ExperimentConfig) -> CliResult<()> {
    let demos = generate_demos(&config.spec).map_err(|e| fail(EXIT_CONFIG)(e.to_string()))?;
    let dir = config.output_dir.join("demos");
    for (i, demo) in demos.iter().enumerate() {
        let mut set =
            DemoSetFile::from_demos(std::slice::from_ref(demo)).map_err(|e| fail(EXIT_CONFIG)(e.to_string()))?;
        set.config = Some(config.to_value());
        write(&dir.join(format!("demo-{i}.json")), &pretty(&set), EXIT_CONFIG)?;
    }
    let frames: usize = demos.iter().map(|d| d.frames().len()).sum();
    let spec = &config.spec;
    println!(
        "{} demonstrations, {} frames, {} phases, radial noise {} m, orientation noise {} rad, seed {} -> {}",
        demos.len(),
        frames,
        spec.phases,
        spec.radial_noise,
        spec.orientation_noise,
        spec.seed,
        dir.display()
    );
    Ok(())
}

/// Contents of the file written by `fit`.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    config: ExperimentConfig,
    demos: DemoSetFile,
    gmm: TimeGmm,
    model: PhaseModel,
}

fn load_demos(path: &Path, config: &ExperimentConfig) -> Result<Vec<Demonstration>, String> {
    let demos = if path.extension().is_some_and(|e| e == "csv") {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        demos_from_csv(&text, config.spec.dt, config.spec.object_frame, "csv")
    } else {
        read_demos(path)
    };
    demos.map_err(|e| format!("{}: {e}", path.display()))
}

pub fn determinant_table(model: &PhaseModel) -> String {
    let dets = model.phase_dets();
    let mut out = format!("{:<14}", "chart");
    for k in 0..dets.len() {
        let _ = write!(out, "{:>14}", format!("phase {}", k + 1));
    }
    out.push('\n');
    for chart in &model.charts {
        let _ = write!(out, "{:<14}", chart.name());
        for (k, phase) in dets.iter().enumerate() {
            let mark = if model.phase_winners[k] == *chart { "*" } else { " " };
            let _ = write!(out, "{:>14}", format!("{:.2e}{mark}", phase[chart]));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<14}", "winner");
    for w in &model.phase_winners {
        let _ = write!(out, "{:>14}", w.name());
    }
    out.push('\n');
    out
}

pub fn determinant_csv(model: &PhaseModel) -> String {
    let mut out = String::from("phase,chart,determinant,position_determinant,winner\n");
    for (k, phase) in model.phase_dets().iter().enumerate() {
        for chart in &model.charts {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{}",
                k + 1,
                chart.name(),
                phase[chart],
                model.position_dets[k][chart],
                model.phase_winners[k] == *chart
            );
        }
    }
    out
}

fn fit(config: &ExperimentConfig, args: &FitArgs, exec: Execution) -> CliResult<()> {
    let demos = load_demos(&args.demos, config).map_err(fail(EXIT_FIT))?;
    let mut config = config.clone();
    // the demonstrations define the scene the model lives in
    config.spec.object_frame = demos[0].object_frame;
    config.spec.dt = demos[0].dt;
    if config.spec.object_frame.space() != config.spec.space() {
        return Err(fail(EXIT_FIT)(format!("demonstrations do not match the {} task space", config.task)));
    }
    let gmm = fit_time_gmm(&demos, config.spec.phases, config.spec.seed, config.spec.horizon)
        .map_err(|e| fail(EXIT_FIT)(format!("phase clustering failed: {e}")))?;
    let model = build_phase_model_with(&demos, &gmm, &config.charts, &config.spec.phase_config(), exec)
        .map_err(|e| fail(EXIT_FIT)(e.to_string()))?;
    for w in &model.warnings {
        eprintln!("warning: {w}");
    }
    let table = determinant_table(&model);
    print!("{table}");
    let dir = config.output_dir.clone();
    let mut demo_set = DemoSetFile::from_demos(&demos).map_err(|e| fail(EXIT_FIT)(e.to_string()))?;
    demo_set.config = Some(config.to_value());
    let csv = format!("{}{}", csv_preamble(&config), determinant_csv(&model));
    let file = ModelFile {
        schema_version: SCHEMA_VERSION,
        config,
        demos: demo_set,
        gmm,
        model,
    };
    write(&dir.join("model.json"), &pretty(&file), EXIT_FIT)?;
    write(&dir.join("determinants.csv"), &csv, EXIT_FIT)?;
    Ok(())
}

pub fn parse_strategy(text: &str) -> Result<ChartStrategy, String> {
    match text {
        "optimal" => Ok(ChartStrategy::Optimal),
        name => {
            let name = name.strip_prefix("fixed-").unwrap_or(name);
            name.parse::<ChartId>()
                .map(ChartStrategy::Fixed)
                .map_err(|e| format!("strategy `{text}`: {e}"))
        }
    }
}

fn parse_q0(text: &str, dof: usize) -> Result<DVector<f64>, String> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format!("--q0 {text}: {e}"))?;
    if values.len() != dof {
        return Err(format!("--q0 {text}: expected {dof} joint angles, found {}", values.len()));
    }
    Ok(DVector::from_vec(values))
}

fn trajectory_csv(task: &PreparedTask, strategy: ChartStrategy, result: &PlanResult) -> Result<String, String> {
    let arm = &task.spec.planning.arm;
    let dof = arm.dof();
    let mut out = String::from("t");
    for j in 0..dof {
        let _ = write!(out, ",q{}", j + 1);
    }
    out.push_str(",x,y,heading,chart,residual_norm\n");
    for t in 0..result.trajectory.horizon() {
        let q = result.trajectory.state(t);
        let pose = forward_kinematics(arm, &q).map_err(|e| e.to_string())?;
        let row = pose_row(t, &pose)[1..].to_vec();
        let chart = match strategy {
            ChartStrategy::Fixed(c) => c,
            ChartStrategy::Optimal => task.model.winners[t],
        };
        let _ = write!(out, "{t}");
        for v in q.iter().chain(&row) {
            let _ = write!(out, ",{v:?}");
        }
        let residual = result.residual_norms[t].map(|r| format!("{r:?}")).unwrap_or_default();
        let _ = writeln!(out, ",{},{residual}", chart.name());
    }
    Ok(out)
}

fn plan(mut config: ExperimentConfig, explicit_config: bool, seed_flag: Option<u64>, args: &PlanArgs) -> CliResult<()> {
    let output_dir = config.output_dir.clone();
    let text = std::fs::read_to_string(&args.model)
        .map_err(|e| fail(EXIT_CONFIG)(format!("cannot read model {}: {e}", args.model.display())))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| fail(EXIT_CONFIG)(format!("{}: {e}", args.model.display())))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(fail(EXIT_CONFIG)(format!(
            "{}: unsupported schema_version {}",
            args.model.display(),
            file.schema_version
        )));
    }
    if !explicit_config {
        config = file.config.clone();
        config.output_dir = output_dir;
        config::resolve_seed(&mut config, seed_flag).map_err(fail(EXIT_CONFIG))?;
    }
    // planning happens in the scene the model was fitted in
    config.spec.object_frame = file.config.spec.object_frame;
    config.spec.dt = file.config.spec.dt;
    if config.spec.kind == TaskKind::GraspPose3D {
        return Err(fail(EXIT_CONFIG)("spatial grasp-pose models are not planned".into()));
    }
    let strategy = parse_strategy(&args.strategy).map_err(fail(EXIT_CONFIG))?;
    let task = PreparedTask {
        spec: config.spec.clone(),
        demos: file
            .demos
            .clone()
            .into_demos("demo")
            .map_err(|e| fail(EXIT_CONFIG)(e.to_string()))?,
        gmm: file.gmm,
        model: file.model,
    };
    let dof = task.spec.planning.arm.dof();
    let states = if args.q0.is_empty() {
        sample_initial_states(&task, args.count).map_err(|e| fail(EXIT_PLAN)(e.to_string()))?
    } else {
        args.q0
            .iter()
            .map(|q| parse_q0(q, dof))
            .collect::<Result<Vec<_>, _>>()
            .map_err(fail(EXIT_CONFIG))?
    };

    let dir = &config.output_dir;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (i, q0) in states.iter().enumerate() {
        let solved = plan_problem(&task, q0.clone(), strategy).and_then(|p| solve(&p));
        let result = match solved {
            Ok(r) => r,
            Err(e) => {
                write(&dir.join(format!("cost-{i}.csv")), "iteration,cost\n", EXIT_PLAN)?;
                failures.push(format!("plan {i}: {e}"));
                continue;
            }
        };
        let mut cost = String::from("iteration,cost\n");
        for (k, c) in result.cost_history.iter().enumerate() {
            let _ = writeln!(cost, "{k},{c:?}");
        }
        write(&dir.join(format!("cost-{i}.csv")), &cost, EXIT_PLAN)?;
        let evaluation = evaluate_trial(&result, &task.spec).ok();
        let traj = trajectory_csv(&task, strategy, &result).map_err(fail(EXIT_PLAN))?;
        write(
            &dir.join(format!("trajectory-{i}.csv")),
            &format!("{}{traj}", csv_preamble(&config)),
            EXIT_PLAN,
        )?;
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "config": config.to_value(),
            "strategy": strategy,
            "initial_state": q0.iter().collect::<Vec<_>>(),
            "evaluation": evaluation,
            "result": result,
        });
        write(&dir.join(format!("plan-{i}.json")), &pretty(&doc), EXIT_PLAN)?;
        println!(
            "plan {i}: {} iterations, final cost {:.6e}, converged {}{}",
            result.iterations,
            result.final_cost(),
            result.converged,
            evaluation
                .map(|e| if e.success {
                    ", success".to_string()
                } else {
                    format!(", failed ({})", e.reason.unwrap_or_default())
                })
                .unwrap_or_default()
        );
        results.push(result);
    }
    if args.svg && !results.is_empty() {
        let charts: Vec<ChartId> = match strategy {
            ChartStrategy::Fixed(c) => vec![c],
            ChartStrategy::Optimal => task.model.charts.clone(),
        };
        let mut contours = Vec::new();
        for phase in &task.model.phases {
            for chart in &charts {
                contours.push((*chart, svg::position_contour(*chart, &phase[chart], &task.spec.object_frame)));
            }
        }
        let scene = svg::Scene {
            arm: &task.spec.planning.arm,
            frame: task.spec.object_frame,
            contours,
            plans: results.iter().collect(),
            metadata: serde_json::to_string(&json!({
                "schema_version": SCHEMA_VERSION,
                "config": config.to_value(),
                "strategy": strategy,
            }))
            .expect("metadata serializes"),
        };
        write(&dir.join("plan.svg"), &svg::render(&scene), EXIT_PLAN)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(fail(EXIT_PLAN)(failures.join("\n")))
    }
}

pub fn summary_table(reports: &[TrialReport]) -> String {
    let mut out = format!("{:<22}{:>10}{:>10}{:>10}\n", "strategy", "success", "trials", "rate");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<22}{:>10}{:>10}{:>9.0}%",
            r.strategy.to_string(),
            r.successes,
            r.total,
            100.0 * r.success_rate()
        );
    }
    out
}

fn evaluate(config: &ExperimentConfig, exec: Execution) -> CliResult<()> {
    if config.task == TaskKind::GraspPose3D {
        return Err(fail(EXIT_CONFIG)("spatial grasp-pose sets are not planned; use fit".into()));
    }
    let task = prepare_with_charts(&config.spec, &config.charts, exec).map_err(|e| fail(EXIT_EVALUATE)(e.to_string()))?;
    let strategies: Vec<ChartStrategy> = config
        .charts
        .iter()
        .map(|c| ChartStrategy::Fixed(*c))
        .chain([ChartStrategy::Optimal])
        .collect();
    let dir = &config.output_dir;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for strategy in strategies {
        match run_prepared(&task, strategy, exec) {
            Ok(report) => {
                let doc = json!({
                    "schema_version": SCHEMA_VERSION,
                    "config": config.to_value(),
                    "report": report,
                });
                write(&dir.join(format!("report-{strategy}.json")), &pretty(&doc), EXIT_EVALUATE)?;
                write(
                    &dir.join(format!("report-{strategy}.csv")),
                    &format!("{}{}", csv_preamble(config), report.to_csv()),
                    EXIT_EVALUATE,
                )?;
                reports.push(report);
            }
            Err(e) => failures.push(format!("{strategy}: {e}")),
        }
    }
    let table = summary_table(&reports);
    print!("{table}");
    let summary = format!(
        "# schema_version={SCHEMA_VERSION}\n# config={}\n{table}",
        serde_json::to_string(&config.to_value()).expect("config serializes")
    );
    write(&dir.join("summary.txt"), &summary, EXIT_EVALUATE)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(fail(EXIT_EVALUATE)(failures.join("\n")))
    }
}
