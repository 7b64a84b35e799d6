//! One function per subcommand. All heavy lifting lives in the library;
//! this layer wires files, splits, and config together and keeps the
//! output contract (files + exit codes) stable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tinybp::intrt::{emit, interp, memory, parse_int_graph, testgen, write_int_graph};
use tinybp::model::{self, FloatModel, TrainConfig};
use tinybp::nas::sweep::{self, SweepConfig, SweepRow};
use tinybp::nas::NasTrainConfig;
use tinybp::quant::{self, QatConfig};

use crate::config::{write_atomic, write_manifest, PipelineConfig};
use crate::pipeline::{self, EvalSummary, Splits};
use crate::svg::{self, PlotPoint};

fn ensure_out_dir(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create {}", cfg.out_dir.display()))
}

fn seed_checkpoint_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.out_dir.join("seed.tbpg")
}

/// Train the configured seed on the train split and score it on the held-out
/// test subjects. Writes `seed.tbpg` and `seed_eval.json`.
pub fn train_seed(cfg: &PipelineConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let splits = pipeline::load_splits(cfg)?;
    let kind = pipeline::target_kind(cfg, splits.train.window_len)?;
    let data = pipeline::train_data(cfg, &splits.train)?;
    let graph = pipeline::seed_graph(cfg, splits.train.window_len)?;
    let mut model = FloatModel::init(graph, cfg.seed)?;
    println!(
        "seed model: {:?} profile, {} params, {} windows to train on",
        cfg.profile,
        model.param_count(),
        data.n
    );

    let losses = model::train(
        &mut model,
        &data,
        &TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            seed: cfg.seed,
        },
    )?;
    for (i, l) in losses.iter().enumerate() {
        println!("epoch {}/{}: train loss {l:.6}", i + 1, losses.len());
    }

    let report = model::evaluate(&mut model, &splits.test, kind)?;
    println!("test MAE: {}", pipeline::describe_report(&report));

    let ckpt = seed_checkpoint_path(cfg);
    write_atomic(&ckpt, &model.to_bytes()?)?;
    let summary = EvalSummary::new(&report, &model, splits.test.len())?;
    write_atomic(
        &cfg.out_dir.join("seed_eval.json"),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    write_manifest(&cfg.out_dir, "train-seed", cfg)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn load_or_train_seed(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<Vec<u8>> {
    let path = match checkpoint {
        Some(p) => {
            if !p.is_file() {
                bail!("checkpoint {} not found (run train-seed first)", p.display());
            }
            p.to_path_buf()
        }
        None => {
            let p = seed_checkpoint_path(cfg);
            if !p.is_file() {
                println!("no checkpoint at {}; training the seed in place", p.display());
                train_seed(cfg)?;
            }
            p
        }
    };
    std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))
}

fn child_path(cfg: &PipelineConfig, grid_index: usize) -> PathBuf {
    cfg.out_dir.join(format!("child_{grid_index:02}.tbpg"))
}

/// One search per cost weight. Completed grid points (a CSV row plus its
/// child checkpoint) survive interruption and are not recomputed.
pub fn nas_sweep(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<()> {
    ensure_out_dir(cfg)?;
    let grid = cfg.grid();
    let seed_bytes = load_or_train_seed(cfg, checkpoint)?;
    let seed_model = FloatModel::from_bytes(&seed_bytes)?;
    let kind = pipeline::eval_kind(cfg, &seed_model)?;

    let splits = pipeline::load_splits(cfg)?;
    pipeline::check_window_len(seed_model.graph.input_len, &splits.train)?;
    let train = pipeline::train_data(cfg, &splits.train)?;
    let val = pipeline::train_data(cfg, &splits.val)?;

    let csv_path = cfg.out_dir.join("pareto.csv");
    let mut done: Vec<Option<SweepRow>> = vec![None; grid.len()];
    if csv_path.is_file() {
        for row in sweep::read_rows(&csv_path)? {
            if let Some(i) = grid.iter().position(|&l| l == row.lambda) {
                if child_path(cfg, i).is_file() {
                    done[i] = Some(row);
                }
            }
        }
        let n = done.iter().flatten().count();
        if n > 0 {
            println!("resuming: {n}/{} grid points already swept", grid.len());
        }
    }

    let todo: Vec<usize> = (0..grid.len()).filter(|&i| done[i].is_none()).collect();
    if !todo.is_empty() {
        let sweep_cfg = SweepConfig {
            lambdas: todo.iter().map(|&i| grid[i]).collect(),
            nas: NasTrainConfig {
                epochs: cfg.nas_epochs,
                batch_size: cfg.batch_size,
                lambda: 0.0,
                ..NasTrainConfig::default()
            },
            ft_epochs: cfg.ft_epochs,
            ft_lr: cfg.ft_lr,
            target: kind,
            seed: cfg.seed,
        };
        let points = match cfg.workers {
            0 => sweep::run_sweep(&seed_bytes, &train, &val, &splits.test, &sweep_cfg)?,
            n => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("cannot build the sweep worker pool")?
                .install(|| sweep::run_sweep(&seed_bytes, &train, &val, &splits.test, &sweep_cfg))?,
        };
        for (&i, point) in todo.iter().zip(&points) {
            write_atomic(&child_path(cfg, i), &point.child)?;
            done[i] = Some(point.row());
        }
    }

    let rows: Vec<SweepRow> = done.into_iter().map(|r| r.expect("all points swept")).collect();
    sweep::write_rows(&csv_path, &rows)?;
    write_manifest(&cfg.out_dir, "nas-sweep", cfg)?;

    let flags = sweep::pareto_rows(&rows)?;
    println!("lambda        params      size_bytes  mae         front");
    for (row, &front) in rows.iter().zip(&flags) {
        let err = sweep::row_error(row).expect("sweep rows carry an error");
        println!(
            "{:<12.3e}  {:<10}  {:<10}  {:<10.4}  {}",
            row.lambda,
            row.params,
            row.size_bytes,
            err,
            if front { "yes" } else { "" }
        );
    }
    println!(
        "wrote {} ({} rows, {} on the front)",
        csv_path.display(),
        rows.len(),
        flags.iter().filter(|&&f| f).count()
    );
    Ok(())
}

fn print_memory(m: &memory::MemoryReport) {
    println!("weights:          {:>10} B", m.weight_bytes);
    println!("peak activations: {:>10} B", m.peak_activation_bytes);
    println!("overhead:         {:>10} B", m.overhead_bytes);
    println!("total:            {:>10} B", m.total_bytes);
    println!("budget:           {:>10} B", m.budget_bytes);
    println!("fit: {}", if m.fits { "yes" } else { "no" });
}

fn write_c_sources(g: &tinybp::intrt::IntGraph, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let src = emit::emit_c(g)?;
    let files = [
        ("model.h", src.model_h),
        ("model.c", src.model_c),
        ("weights.h", src.weights_h),
        ("main.c", emit::demo_main()),
    ];
    let mut out = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

/// Quantize a float checkpoint: fold + calibrate + tune, export the integer
/// model, emit C, and hold the result against the storage budget.
pub fn quantize(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<()> {
    ensure_out_dir(cfg)?;
    let default_path = seed_checkpoint_path(cfg);
    let path = checkpoint.unwrap_or(&default_path);
    let mut model = pipeline::load_model(path)?;
    let kind = pipeline::eval_kind(cfg, &model)?;

    let splits = pipeline::load_splits(cfg)?;
    pipeline::check_window_len(model.graph.input_len, &splits.train)?;
    let data = pipeline::train_data(cfg, &splits.train)?;

    let float_report = model::evaluate(&mut model, &splits.test, kind)?;
    let qm = quant::qat_finetune(
        &model,
        &data,
        &QatConfig {
            epochs: cfg.qat_epochs,
            batch_size: cfg.batch_size,
            lr: cfg.qat_lr,
            seed: cfg.seed,
            ..QatConfig::default()
        },
    )?;
    let quant_report = quant::evaluate_quant(&qm, &splits.test, kind)?;
    let float_err = pipeline::mean_error(&float_report)?;
    let quant_err = pipeline::mean_error(&quant_report)?;
    println!("float MAE: {}", pipeline::describe_report(&float_report));
    println!(
        "int8  MAE: {} ({:+.1}%)",
        pipeline::describe_report(&quant_report),
        100.0 * (quant_err - float_err) / float_err
    );

    let g = quant::export_int_graph(&qm)?;
    let tbpi = cfg.out_dir.join("model.tbpi");
    write_atomic(&tbpi, &write_int_graph(&g)?)?;
    println!("wrote {}", tbpi.display());
    let c_files = write_c_sources(&g, &cfg.out_dir.join("csrc"))?;
    for f in &c_files {
        println!("wrote {}", f.display());
    }

    let mem = memory::memory_report(
        &g,
        &memory::Limits {
            budget_bytes: cfg.budget_bytes,
            ..memory::Limits::default()
        },
    )?;
    print_memory(&mem);
    let report = serde_json::json!({
        "float_mae_sbp": float_report.mae_sbp,
        "float_mae_dbp": float_report.mae_dbp,
        "quant_mae_sbp": quant_report.mae_sbp,
        "quant_mae_dbp": quant_report.mae_dbp,
        "memory": mem,
    });
    write_atomic(
        &cfg.out_dir.join("quant_report.json"),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    write_manifest(&cfg.out_dir, "quantize", cfg)?;

    if let Err(e) = memory::require_fit(&mem) {
        return Err(anyhow::Error::new(e).context("o.o.m."));
    }
    Ok(())
}

/// Emit the C sources for an exported integer model.
pub fn emit_c(model: &Path, out_dir: &Path) -> Result<()> {
    let bytes =
        std::fs::read(model).with_context(|| format!("cannot read {}", model.display()))?;
    let g = parse_int_graph(&bytes)?;
    let files = write_c_sources(&g, out_dir)?;
    let mem = memory::memory_report(&g, &memory::Limits::default())?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    println!(
        "arena {} B, weights {} B; compile with: cc -std=c99 -O2 model.c main.c",
        mem.peak_activation_bytes, mem.weight_bytes
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

/// Score a float checkpoint or an integer model on one dataset split,
/// whichever container the file holds.
pub fn eval(cfg: &PipelineConfig, model: &Path, split: SplitName) -> Result<()> {
    let bytes =
        std::fs::read(model).with_context(|| format!("cannot read {}", model.display()))?;
    let splits = pipeline::load_splits(cfg)?;
    let ws = match split {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
        SplitName::All => {
            // Splits partition the windows, so evaluating all of them just
            // walks the three parts in turn.
            let report = eval_one(cfg, &bytes, &splits)?;
            println!("{report}");
            return Ok(());
        }
    };
    let report = eval_windows(cfg, &bytes, ws)?;
    println!("windows: {}", ws.len());
    println!("MAE: {report}");
    Ok(())
}

fn eval_windows(
    cfg: &PipelineConfig,
    bytes: &[u8],
    ws: &tinybp::data::WindowSet,
) -> Result<String> {
    let report = if bytes.starts_with(b"TBPI") {
        let g = parse_int_graph(bytes)?;
        pipeline::evaluate_int(&g, ws, cfg.target)?
    } else {
        let mut m = FloatModel::from_bytes(bytes)?;
        pipeline::check_window_len(m.graph.input_len, ws)?;
        let kind = pipeline::eval_kind(cfg, &m)?;
        model::evaluate(&mut m, ws, kind)?
    };
    Ok(pipeline::describe_report(&report))
}

fn eval_one(cfg: &PipelineConfig, bytes: &[u8], splits: &Splits) -> Result<String> {
    let mut out = String::new();
    for (name, ws) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let line = eval_windows(cfg, bytes, ws)?;
        writeln!(out, "{name}: {line} ({} windows)", ws.len()).expect("string write");
    }
    Ok(out.trim_end().to_string())
}

/// Summarize a sweep directory: print the front, and write `report.csv`
/// (rows + pareto flag) and `report.svg` (size/error scatter). A pure
/// function of the input files.
pub fn report(dir: &Path) -> Result<()> {
    let csv_path = dir.join("pareto.csv");
    if !csv_path.is_file() {
        bail!(
            "missing {}; expected sweep outputs (pareto.csv, child_*.tbpg) from nas-sweep",
            csv_path.display()
        );
    }
    let rows = sweep::read_rows(&csv_path)?;
    if rows.is_empty() {
        bail!("{} holds no sweep rows", csv_path.display());
    }
    let flags = sweep::pareto_rows(&rows)?;

    let seed_eval = dir.join("seed_eval.json");
    let seed_point = if seed_eval.is_file() {
        let summary: EvalSummary = serde_json::from_slice(
            &std::fs::read(&seed_eval)
                .with_context(|| format!("cannot read {}", seed_eval.display()))?,
        )
        .with_context(|| format!("bad eval summary {}", seed_eval.display()))?;
        summary.error().map(|e| (summary.size_bytes as f64, e))
    } else {
        None
    };

    let mut csv = String::from("lambda,params,size_bytes,macs,mae_sbp,mae_dbp,seed,pareto\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (row, &front) in rows.iter().zip(&flags) {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.lambda,
            row.params,
            row.size_bytes,
            row.macs,
            cell(row.mae_sbp),
            cell(row.mae_dbp),
            row.seed,
            front
        )
        .expect("string write");
    }
    write_atomic(&dir.join("report.csv"), csv.as_bytes())?;

    let points: Vec<PlotPoint> = rows
        .iter()
        .zip(&flags)
        .map(|(row, &front)| PlotPoint {
            size_bytes: row.size_bytes as f64,
            error: sweep::row_error(row).expect("checked by pareto_rows"),
            pareto: front,
        })
        .collect();
    write_atomic(&dir.join("report.svg"), svg::scatter(&points, seed_point).as_bytes())?;

    println!("{} sweep points, front:", rows.len());
    let mut front: Vec<&SweepRow> = rows
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|(r, _)| r)
        .collect();
    front.sort_by_key(|r| r.size_bytes);
    for row in front {
        println!(
            "  lambda {:.3e}: {} params, mae {:.4}",
            row.lambda,
            row.params,
            sweep::row_error(row).expect("checked")
        );
    }
    if let Some((size, err)) = seed_point {
        println!("  seed: {size} bytes, mae {err:.4}");
    }
    println!("wrote {} and report.svg", dir.join("report.csv").display());
    Ok(())
}

/// Differential harness: random integer models, compiled from the emitted C
/// and executed against the interpreter, bit for bit. Also proves emission
/// is byte-deterministic across a container roundtrip.
pub fn selftest(graphs: usize, inputs: usize, seed: u64, keep_dir: Option<&Path>) -> Result<()> {
    if graphs == 0 || inputs == 0 {
        bail!("selftest needs at least one graph and one input per graph");
    }
    if !emit::have_cc() {
        bail!("no C compiler on PATH; install cc or set CC to one");
    }
    let scratch;
    let dir = match keep_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.to_path_buf()
        }
        None => {
            scratch = std::env::temp_dir().join(format!(
                "tinybp-selftest-{}-{seed}",
                std::process::id()
            ));
            std::fs::create_dir_all(&scratch)?;
            scratch.clone()
        }
    };

    let result = run_selftest(graphs, inputs, seed, &dir);
    if keep_dir.is_none() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    let pairs = result?;
    println!("bit-exact: PASS ({graphs} graphs, {pairs} input pairs)");
    Ok(())
}

fn run_selftest(graphs: usize, inputs: usize, seed: u64, dir: &Path) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen_cfg = testgen::GenConfig::default();
    let mut pairs = 0usize;
    for gi in 0..graphs {
        let g = testgen::random_int_graph(&mut rng, &gen_cfg);
        let first = emit::emit_c(&g)?;
        let roundtrip = parse_int_graph(&write_int_graph(&g)?)?;
        let second = emit::emit_c(&roundtrip)?;
        if first.model_c != second.model_c
            || first.model_h != second.model_h
            || first.weights_h != second.weights_h
        {
            bail!("graph {gi}: emission changed across a container roundtrip");
        }
        let ins: Vec<Vec<i8>> =
            (0..inputs).map(|_| testgen::random_input(&mut rng, &g)).collect();
        let want: Vec<Vec<i8>> =
            ins.iter().map(|x| interp::run(&g, x)).collect::<tinybp::Result<_>>()?;
        let got = emit::compile_and_run(&g, &ins, dir)?;
        for (k, (w, h)) in want.iter().zip(&got).enumerate() {
            if w != h {
                return Err(anyhow::Error::new(tinybp::Error::Numerical(format!(
                    "graph {gi} input {k}: compiled output diverges from the interpreter"
                ))));
            }
            pairs += 1;
        }
    }
    Ok(pairs)
}
