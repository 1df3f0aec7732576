use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsim_core::agent::AgentNet;
use tsim_core::config::RunConfig;
use tsim_core::env::{Action, Playpen, PlaypenEnv};
use tsim_core::render::{self, Eye, ObjectClass, Scene};
use tsim_core::sac::{self, EvalPolicy, EvalReport, MetricsRow, Sac};
use tsim_core::transfer::{self, Dataset, MatrixInputs, Task, TransferRegime};
use tsim_core::{write_atomic, Checkpoint};

use crate::{png, Cli, Command, Global, PolicyArg, TransferArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        config.seed = s;
    }
    let g = &cli.global;
    match cli.command {
        Command::GenData => gen_data(g, config),
        Command::TrainRl { frames } => {
            if let Some(f) = frames {
                config.sac.total_frames = f;
            }
            config.validate()?;
            let dir = run_dir(g, &config)?;
            train_rl(&config, &dir).map(|_| ())
        }
        Command::TrainAutoencoder { frames } => {
            if let Some(f) = frames {
                config.transfer.autoencoder.frames = f;
            }
            config.validate()?;
            let dir = run_dir(g, &config)?;
            train_autoencoder(&config, &dir).map(|_| ())
        }
        Command::Transfer(args) => transfer_cmd(g, config, args),
        Command::Eval {
            checkpoint,
            policy,
            episodes,
        } => {
            if let Some(n) = episodes {
                config.sac.eval_episodes = n;
            }
            config.validate()?;
            let dir = run_dir(g, &config)?;
            eval_cmd(&config, &dir, checkpoint.as_deref(), policy)
        }
        Command::RenderSample { empty } => {
            config.validate()?;
            let dir = run_dir(g, &config)?;
            render_sample_cmd(&config, &dir, empty)
        }
        Command::Report { run } => report_cmd(&config, &run),
    }
}

/// Creates the output directory and echoes the effective config into it.
fn run_dir(g: &Global, config: &RunConfig) -> Result<PathBuf> {
    let dir = match &g.out {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            Path::new(&config.report.runs_dir).join(format!("{stamp}-{}", config.seed))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.toml"), config.to_toml()?.as_bytes())?;
    Ok(dir)
}

fn playpen(config: &RunConfig) -> Result<Playpen> {
    Ok(Playpen::new(config.env.clone(), config.render.clone())?)
}

fn gen_data(g: &Global, config: RunConfig) -> Result<()> {
    config.validate()?;
    let dir = run_dir(g, &config)?;
    let ds = generate(&config, &dir)?;
    let tr = Dataset::class_counts(&ds.train);
    let te = Dataset::class_counts(&ds.test);
    println!("train {}  test {}", ds.train.len(), ds.test.len());
    for class in ObjectClass::ALL {
        let i = class.index();
        println!("  {:<8} train {:>5}  test {:>4}", class.name(), tr[i], te[i]);
    }
    Ok(())
}

fn generate(config: &RunConfig, dir: &Path) -> Result<Dataset> {
    let ds = transfer::generate_dataset(config.seed, &config.transfer.dataset, &config.render)?;
    let path = dir.join("dataset.tds");
    ds.save(&path)?;
    println!("wrote {} ({} samples)", path.display(), ds.len());
    Ok(ds)
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut buf = Vec::new();
    sac::write_metrics_csv(rows, &mut buf)?;
    write_atomic(path, &buf)?;
    Ok(())
}

fn write_eval(path: &Path, policy: &str, r: &EvalReport) -> Result<()> {
    let text = format!(
        "policy,episodes,successes,success_rate,mean_return,mean_length\n{policy},{},{},{:.4},{:.6},{:.2}\n",
        r.episodes,
        r.successes,
        r.success_rate(),
        r.mean_return,
        r.mean_length
    );
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn print_eval(policy: &str, r: &EvalReport) {
    println!(
        "eval ({policy}): success_rate {:.2} ({}/{})  mean_return {:.3}  mean_length {:.1}",
        r.success_rate(),
        r.successes,
        r.episodes,
        r.mean_return,
        r.mean_length
    );
}

/// Trains the agent into `dir/agent.ckpt`; returns the final checkpoint.
fn train_rl(config: &RunConfig, dir: &Path) -> Result<Checkpoint> {
    let mut env = PlaypenEnv::new(playpen(config)?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = AgentNet::new(config.agent.clone(), Action::ALL.len(), &mut rng)?;
    let mut learner = Sac::new(net, config.sac.clone())?;
    let ckpt_path = dir.join("agent.ckpt");
    let metrics_path = dir.join(&config.report.metrics_name);
    learner.to_checkpoint().save(&ckpt_path)?;
    write_metrics(&metrics_path, &[])?;

    let start = Instant::now();
    let mut rows = Vec::new();
    let result = sac::train(&mut env, &mut learner, config.seed, |row, l| {
        rows.push(*row);
        println!(
            "frame {:>8}  mean_return {:>8.3}  success {:.2}  alpha {:.4}  updates {}  {:.0}s",
            row.frame,
            row.mean_return,
            row.success_rate,
            row.alpha,
            l.updates,
            start.elapsed().as_secs_f64()
        );
        l.to_checkpoint().save(&ckpt_path)?;
        write_metrics(&metrics_path, &rows).map_err(|e| tsim_core::Error::Checkpoint(format!("{e:#}")))
    });
    if let Err(e) = result {
        if e.is_numerical() {
            eprintln!("numerical abort; last good checkpoint kept at {}", ckpt_path.display());
        }
        return Err(e.into());
    }
    let ckpt = learner.to_checkpoint();
    ckpt.save(&ckpt_path)?;
    write_metrics(&metrics_path, &rows)?;
    println!("wrote {}", ckpt_path.display());

    if config.sac.total_frames > 0 && config.sac.eval_episodes > 0 {
        let (name, policy) = if config.sac.eval_stochastic {
            ("stochastic", EvalPolicy::Stochastic(&learner.net))
        } else {
            ("greedy", EvalPolicy::Greedy(&learner.net))
        };
        let report = sac::evaluate(&mut env, policy, config.sac.eval_episodes, config.seed)?;
        print_eval(name, &report);
        write_eval(&dir.join("eval.csv"), name, &report)?;
    }
    Ok(ckpt)
}

fn train_autoencoder(config: &RunConfig, dir: &Path) -> Result<Checkpoint> {
    let pp = playpen(config)?;
    let start = Instant::now();
    let ae = transfer::train_autoencoder(&pp, &config.agent, &config.transfer.autoencoder, config.seed, |e, l| {
        println!("epoch {:>3}  mse {l:.6}  {:.0}s", e + 1, start.elapsed().as_secs_f64())
    })?;
    let ckpt = ae.to_checkpoint();
    let path = dir.join("autoencoder.ckpt");
    ckpt.save(&path)?;
    println!("wrote {}", path.display());
    Ok(ckpt)
}

fn parse_list<T: std::str::FromStr<Err = tsim_core::Error>>(items: &Option<Vec<String>>, all: &[T]) -> Result<Vec<T>>
where
    T: Copy + PartialEq,
{
    let Some(items) = items else {
        return Ok(all.to_vec());
    };
    let mut out = Vec::new();
    for s in items {
        let v: T = s.trim().parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        bail!("empty selection");
    }
    // keep canonical order regardless of how the flag listed them
    Ok(all.iter().copied().filter(|a| out.contains(a)).collect())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn transfer_cmd(g: &Global, mut config: RunConfig, args: TransferArgs) -> Result<()> {
    let regimes = parse_list(&args.regimes, &TransferRegime::ALL)?;
    let tasks = parse_list(&args.tasks, &Task::ALL)?;
    if let Some(s) = &args.seeds {
        config.transfer.seeds = s.clone();
    }
    config.validate()?;
    let needs_rl = regimes.contains(&TransferRegime::Proposed);
    let needs_ae = regimes.contains(&TransferRegime::Autoencoder);
    // check every input before any long-running work
    for (flag, path) in [
        ("--dataset", &args.dataset),
        ("--rl-checkpoint", &args.rl_checkpoint),
        ("--ae-checkpoint", &args.ae_checkpoint),
    ] {
        if let Some(p) = path {
            if !p.exists() {
                bail!("{flag} {}: no such file", p.display());
            }
        }
    }
    if !args.train_missing {
        if args.dataset.is_none() {
            bail!("--dataset is required (or pass --train-missing to generate it)");
        }
        if needs_rl && args.rl_checkpoint.is_none() {
            bail!("regime proposed needs --rl-checkpoint (or --train-missing)");
        }
        if needs_ae && args.ae_checkpoint.is_none() {
            bail!("regime autoencoder needs --ae-checkpoint (or --train-missing)");
        }
    }
    let dir = run_dir(g, &config)?;
    let dataset = match &args.dataset {
        Some(p) => Dataset::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => generate(&config, &dir)?,
    };
    let rl = match (&args.rl_checkpoint, needs_rl) {
        (Some(p), _) => Some(load_checkpoint(p)?),
        (None, true) => Some(train_rl(&config, &dir)?),
        (None, false) => None,
    };
    let ae = match (&args.ae_checkpoint, needs_ae) {
        (Some(p), _) => Some(load_checkpoint(p)?),
        (None, true) => Some(train_autoencoder(&config, &dir)?),
        (None, false) => None,
    };

    let inputs = MatrixInputs {
        spec: config.agent.clone(),
        rl_checkpoint: rl.as_ref(),
        ae_checkpoint: ae.as_ref(),
        regimes,
        tasks,
        seeds: config.transfer.seeds.clone(),
        jobs: g.jobs.max(1),
    };
    let start = Instant::now();
    let (rows, cells) = transfer::run_matrix(&dataset, &inputs, &config.transfer, |c| {
        println!(
            "{:<14} {:<12} seed {:>3}  {} {:>7.2}  {:.0}s",
            c.task.name(),
            c.regime.name(),
            c.seed,
            c.task.metric(),
            c.value,
            start.elapsed().as_secs_f64()
        )
    })?;
    let mut cell_csv = String::from("regime,task,seed,value\n");
    for c in &cells {
        cell_csv.push_str(&format!("{},{},{},{:.6}\n", c.regime.name(), c.task.name(), c.seed, c.value));
    }
    write_atomic(&dir.join("cells.csv"), cell_csv.as_bytes())?;
    write_atomic(&dir.join(&config.report.csv_name), transfer::results_csv(&rows).as_bytes())?;
    let md = transfer::results_markdown(&rows);
    write_atomic(&dir.join(&config.report.markdown_name), md.as_bytes())?;
    println!("\n{md}");
    println!("{} rows from {} runs in {:.0}s", rows.len(), cells.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn eval_cmd(config: &RunConfig, dir: &Path, checkpoint: Option<&Path>, policy: PolicyArg) -> Result<()> {
    let mut env = PlaypenEnv::new(playpen(config)?);
    let episodes = config.sac.eval_episodes;
    let net = match checkpoint {
        Some(p) => {
            let mut net = AgentNet::new(config.agent.clone(), Action::ALL.len(), &mut ChaCha8Rng::seed_from_u64(0))?;
            net.load_checkpoint(&load_checkpoint(p)?)?;
            Some(net)
        }
        None => None,
    };
    let need_net = || {
        net.as_ref()
            .ok_or_else(|| anyhow::anyhow!("policy {policy:?} needs --checkpoint"))
    };
    let (name, report) = match policy {
        PolicyArg::Stochastic => (
            "stochastic",
            sac::evaluate(&mut env, EvalPolicy::Stochastic(need_net()?), episodes, config.seed)?,
        ),
        PolicyArg::Greedy => ("greedy", sac::evaluate(&mut env, EvalPolicy::Greedy(need_net()?), episodes, config.seed)?),
        PolicyArg::Uniform => (
            "uniform",
            sac::evaluate(&mut env, EvalPolicy::<tsim_core::agent::Encoder>::Uniform, episodes, config.seed)?,
        ),
        PolicyArg::Oracle => (
            "oracle",
            sac::evaluate_with(&mut env, episodes, config.seed, |e, _, _, _| e.oracle_action())?,
        ),
    };
    print_eval(name, &report);
    write_eval(&dir.join("eval.csv"), name, &report)
}

fn render_sample_cmd(config: &RunConfig, dir: &Path, empty: bool) -> Result<()> {
    let style = &config.render;
    let camera = transfer::dataset_camera(style);
    let seed = config.seed;
    let (left_path, right_path) = (dir.join(format!("sample_{seed}_L.png")), dir.join(format!("sample_{seed}_R.png")));
    if empty {
        let obs = render::render(&Scene::empty(style), &camera);
        png::save(&png::eye_image(&obs, Eye::Left), &left_path)?;
        png::save(&png::eye_image(&obs, Eye::Right), &right_path)?;
        println!("empty scene");
    } else {
        let d = &config.transfer.dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let class = ObjectClass::ALL[rng.gen_range(0..3)];
        let bmax = d.bearing_max_deg.to_radians();
        let mut tries = 0;
        let (scene, distance, left_box) = loop {
            let distance = rng.gen_range(d.distance_min..=d.distance_max);
            let bearing = if bmax > 0.0 { rng.gen_range(-bmax..=bmax) } else { 0.0 };
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            let scene = transfer::single_object_scene(style, class, distance, bearing, yaw)?;
            let mask = render::silhouette_mask(&scene, &camera, 0, Eye::Left)?;
            if let Some(b) = render::mask_to_bbox(&mask) {
                break (scene, distance, b);
            }
            tries += 1;
            if tries > 100 {
                bail!("object never visible with this render/dataset config");
            }
        };
        let obs = render::render(&scene, &camera);
        let mut left = png::eye_image(&obs, Eye::Left);
        png::draw_box(&mut left, left_box);
        let mut right = png::eye_image(&obs, Eye::Right);
        if let Some(b) = render::mask_to_bbox(&render::silhouette_mask(&scene, &camera, 0, Eye::Right)?) {
            png::draw_box(&mut right, b);
        }
        png::save(&left, &left_path)?;
        png::save(&right, &right_path)?;
        println!("class {}", class.name());
        println!("distance {distance:.4}");
        println!(
            "bbox cx {:.4} cy {:.4} w {:.4} h {:.4}",
            left_box.cx, left_box.cy, left_box.w, left_box.h
        );
    }
    println!("wrote {} and {}", left_path.display(), right_path.display());
    Ok(())
}

fn report_cmd(config: &RunConfig, run: &Path) -> Result<()> {
    let csv_path = run.join(&config.report.csv_name);
    let text = fs::read_to_string(&csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    let rows = transfer::parse_results_csv(&text)?;
    let md = transfer::results_markdown(&rows);
    write_atomic(&run.join(&config.report.markdown_name), md.as_bytes())?;
    println!("{md}");
    let metrics = run.join(&config.report.metrics_name);
    if let Ok(m) = fs::read_to_string(&metrics) {
        if let Some(last) = m.lines().skip(1).last() {
            println!("last training log row: {last}");
        }
    }
    Ok(())
}
