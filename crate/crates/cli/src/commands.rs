use std::fs;
use std::path::{Path, PathBuf};

use shira_core::adapter::{apply, extract, fuse_lora, fuse_multi};
use shira_core::bench::{bench_end_to_end, bench_with, sig3, synthetic_model_shapes};
use shira_core::format::{
    load_adapters, load_masks, load_weights, model_from_tensors, model_tensors, save_adapters, save_masks,
    save_weights,
};
use shira_core::linalg::DenseMatrix;
use shira_core::mask::{build_struct_mask_at, collect_gradients, MaskRecipe, MaskWarning};
use shira_core::model::LossKind;
use shira_core::ortho::{simulate, AdapterStyle, OrthoReport};
use shira_core::rank::mask_rank_report;
use shira_core::trainer::{
    evaluate, extract_adapters, train_lora, train_shira, Optimizer, TeacherTask, TrainConfig,
};
use shira_core::{Exec, Mask, ShiraError, SparseAdapter, Strategy, TensorId, ToyModel};

use crate::{
    lora_json, verify, AdapterKind, ApplyArgs, BenchArgs, BuildMaskArgs, Cli, CliError, Command, ExtractArgs,
    FuseArgs, OrthoArgs, TrainArgs,
};

/// Masks larger than this skip the SVD-based rank report.
const RANK_REPORT_MAX: usize = 512 * 512;

type Out<T = ()> = Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

fn require_file(path: &Path) -> Out {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file not found: {}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Out {
    fs::write(path, text).map_err(|source| {
        CliError::Core(ShiraError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn inputs(command: &Command) -> Vec<PathBuf> {
    match command {
        Command::BuildMask(a) => a.weights.iter().chain(&a.exclude).cloned().collect(),
        Command::Train(a) => {
            let mut v: Vec<PathBuf> = a.model.iter().cloned().collect();
            if let Some(m) = a.mask.as_deref().filter(|m| *m != "oracle") {
                v.push(m.into());
            }
            v
        }
        Command::Extract(a) => vec![a.base.clone(), a.tuned.clone()],
        Command::Apply(a) => vec![a.weights.clone(), a.adapter.clone()],
        Command::Fuse(a) => std::iter::once(&a.weights)
            .chain(&a.adapters)
            .chain(&a.lora)
            .cloned()
            .collect(),
        Command::Ortho(_) | Command::VerifyLemmas | Command::BenchSwitch(_) => Vec::new(),
    }
}

pub fn dispatch(cli: &Cli) -> Out {
    for path in inputs(&cli.command) {
        require_file(&path)?;
    }
    fs::create_dir_all(&cli.out).map_err(|source| {
        CliError::Core(ShiraError::Io {
            path: cli.out.clone(),
            source,
        })
    })?;
    match &cli.command {
        Command::BuildMask(a) => build_mask(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Extract(a) => extract_cmd(cli, a),
        Command::Apply(a) => apply_cmd(cli, a),
        Command::Fuse(a) => fuse(cli, a),
        Command::Ortho(a) => ortho(cli, a),
        Command::VerifyLemmas => verify_lemmas(cli),
        Command::BenchSwitch(a) => bench_switch(cli, a),
    }
}

fn tensor<'a>(tensors: &'a [(String, DenseMatrix)], name: &str) -> Out<&'a DenseMatrix> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m)
        .ok_or_else(|| usage(format!("no tensor named `{name}` in the weights file")))
}

fn build_mask(cli: &Cli, a: &BuildMaskArgs) -> Out {
    let needs_weights = matches!(a.strategy, Strategy::Wm | Strategy::Grad | Strategy::Snip);
    let weights = match (&a.weights, needs_weights) {
        (Some(p), _) => Some(load_weights(p)?),
        (None, true) => return Err(usage(format!("strategy {} needs --weights", a.strategy))),
        (None, false) => None,
    };
    let (rows, cols) = match &weights {
        Some(t) => tensor(t, &a.tensor)?.shape(),
        None => match (a.rows.or(a.dim), a.cols.or(a.dim)) {
            (Some(r), Some(c)) => (r, c),
            _ => return Err(usage("give --dim or both --rows and --cols")),
        },
    };

    let exclude = match &a.exclude {
        Some(p) => {
            let masks = load_masks(p)?;
            let m = masks
                .iter()
                .find(|(n, _)| *n == a.tensor)
                .or(masks.first())
                .map(|(_, m)| m)
                .ok_or_else(|| usage("exclude file holds no mask"))?;
            if m.shape() != (rows, cols) {
                return Err(usage(format!(
                    "exclude mask is {}x{}, target is {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            m.indices()
        }
        None => Vec::new(),
    };

    let mask = match a.strategy {
        Strategy::Struct => {
            let f = a.frequency.ok_or_else(|| usage("strategy struct needs --frequency"))?;
            build_struct_mask_at(rows, cols, f, a.offset, a.axis, a.diagonal)?
        }
        _ => {
            let mut recipe = MaskRecipe::new(a.strategy);
            recipe.density = a.density;
            recipe.bernoulli_p = a.p;
            recipe.seed = cli.seed;
            recipe.exclude = exclude;
            let w = weights.as_deref().map(|t| tensor(t, &a.tensor)).transpose()?;
            let grads = if matches!(a.strategy, Strategy::Grad | Strategy::Snip) {
                let t = weights.as_deref().expect("checked above");
                let model = model_from_tensors(t)?;
                let id: TensorId = a.tensor.parse()?;
                let task = TeacherTask::new(&model, &[id], 0.02, 1.0, None, a.task_seed.unwrap_or(cli.seed))?;
                let batches = task.calibration_batches(a.calib_batches, a.batch_size)?;
                let [g1, g2] = collect_gradients(&model, &batches, LossKind::Mse)?;
                Some(if id == TensorId::W1 { g1 } else { g2 })
            } else {
                None
            };
            recipe.build(rows, cols, w, grads.as_ref())?
        }
    };

    match mask.warning() {
        Some(MaskWarning::EmptyMask) => eprintln!("warning: mask selects no position"),
        Some(MaskWarning::EmptyStride) => {
            eprintln!("warning: struct frequency exceeds the strided dimension, only the first line is set")
        }
        None => {}
    }

    let path = cli.out.join(format!("{}.shra", a.name));
    save_masks(&[(a.tensor.clone(), mask.clone())], &path)?;
    let rank = if rows * cols <= RANK_REPORT_MAX {
        mask_rank_report(&mask, cli.seed)?.numeric_rank.to_string()
    } else {
        "skipped".into()
    };
    println!(
        "strategy={} shape={rows}x{cols} nnz={} density={:.6} rank={rank} file={}",
        a.strategy,
        mask.count(),
        mask.density(),
        path.display()
    );
    Ok(())
}

fn parse_block(s: &str) -> Out<(usize, usize)> {
    let (start, len) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("--input-block expects start:len, got `{s}`")))?;
    let parse = |x: &str| {
        x.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("--input-block expects start:len, got `{s}`")))
    };
    Ok((parse(start)?, parse(len)?))
}

fn parse_ids(names: &[String]) -> Out<Vec<TensorId>> {
    names.iter().map(|n| n.parse().map_err(CliError::Core)).collect()
}

fn train(cli: &Cli, a: &TrainArgs) -> Out {
    let base = match &a.model {
        Some(p) => model_from_tensors(&load_weights(p)?)?,
        None => ToyModel::random(a.input, a.hidden, a.output, cli.seed),
    };
    let block = a.input_block.as_deref().map(parse_block).transpose()?;
    let task = TeacherTask::new(
        &base,
        &parse_ids(&a.task_tensors)?,
        a.task_density,
        a.task_magnitude,
        block,
        a.task_seed.unwrap_or(cli.seed),
    )?;
    let config = TrainConfig {
        learning_rate: a.lr.unwrap_or(match a.optimizer {
            Optimizer::Sgd => 2.0,
            Optimizer::Adam => 0.01,
        }),
        steps: a.steps,
        batch_size: a.batch_size,
        optimizer: a.optimizer,
        seed: cli.seed,
        loss: LossKind::Mse,
        train_biases: a.train_biases,
    };
    config.validate()?;

    let out = &cli.out;
    save_weights(&model_tensors(&base), out.join("base.shrw"))?;
    let support: Vec<(String, Mask)> = task
        .oracle_masks()
        .into_iter()
        .map(|(id, m)| (id.name().to_string(), m))
        .collect();
    save_masks(&support, out.join("teacher_support.shra"))?;

    let (tuned, log, trainable) = match a.adapter {
        AdapterKind::Shira => {
            let masks = match a.mask.as_deref() {
                None => return Err(usage("--mask is required for sparse training (a file or `oracle`)")),
                Some("oracle") => task.oracle_masks(),
                Some(p) => load_masks(p)?
                    .into_iter()
                    .map(|(n, m)| Ok((n.parse::<TensorId>()?, m)))
                    .collect::<Result<_, ShiraError>>()?,
            };
            let trainable: usize = masks.iter().map(|(_, m)| m.count()).sum();
            let (tuned, log) = train_shira(&base, &masks, &task, &config)?;
            let adapters: Vec<SparseAdapter> = extract_adapters(&base, &tuned)?
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            save_adapters(&adapters, out.join("adapter.shra"))?;
            (tuned, log, trainable)
        }
        AdapterKind::Lora => {
            let targets = parse_ids(&a.targets)?;
            let (set, log) = train_lora(&base, &targets, a.rank, a.alpha, a.scaling, &task, &config)?;
            let factors: Vec<_> = set.adapters.iter().map(|(_, l)| l.clone()).collect();
            lora_json::save(&factors, &out.join("lora.json"))?;
            let trainable = factors.iter().map(|l| l.a.len() + l.b.len()).sum();
            (set.merged(&base)?, log, trainable)
        }
    };
    save_weights(&model_tensors(&tuned), out.join("model.shrw"))?;
    write_text(&out.join("train_log.csv"), &log.to_csv())?;
    let heldout = task.heldout(a.heldout)?;
    let mse = evaluate(&tuned, &heldout, LossKind::Mse)?;
    let base_mse = evaluate(&base, &heldout, LossKind::Mse)?;
    println!("trainable_params={trainable} base_mse={base_mse:.6e} heldout_mse={mse:.6e}");
    Ok(())
}

fn extract_cmd(cli: &Cli, a: &ExtractArgs) -> Out {
    let base = load_weights(&a.base)?;
    let tuned = load_weights(&a.tuned)?;
    let mut adapters = Vec::new();
    for (name, w_new) in &tuned {
        let w_base = tensor(&base, name)?;
        adapters.push(extract(w_new, w_base, name.clone())?);
    }
    let path = cli.out.join(format!("{}.shra", a.name));
    save_adapters(&adapters, &path)?;
    for s in &adapters {
        println!("tensor={} nnz={} density={:.6}", s.name(), s.nnz(), s.density());
    }
    Ok(())
}

fn apply_cmd(cli: &Cli, a: &ApplyArgs) -> Out {
    let mut weights = load_weights(&a.weights)?;
    let adapters = load_adapters(&a.adapter)?;
    for s in &adapters {
        let slot = weights
            .iter_mut()
            .find(|(n, _)| n == s.name())
            .ok_or_else(|| usage(format!("adapter targets unknown tensor `{}`", s.name())))?;
        slot.1 = apply(&slot.1, s, a.alpha)?;
    }
    save_weights(&weights, cli.out.join(format!("{}.shrw", a.name)))?;
    println!("applied={} alpha={}", adapters.len(), a.alpha);
    Ok(())
}

fn fuse(cli: &Cli, a: &FuseArgs) -> Out {
    if !a.alphas.is_empty() && a.alphas.len() != a.adapters.len() {
        return Err(usage(format!(
            "{} alphas given for {} adapters",
            a.alphas.len(),
            a.adapters.len()
        )));
    }
    let mut weights = load_weights(&a.weights)?;
    let mut sparse: Vec<(SparseAdapter, f64)> = Vec::new();
    for (i, p) in a.adapters.iter().enumerate() {
        let alpha = a.alphas.get(i).copied().unwrap_or(1.0);
        sparse.extend(load_adapters(p)?.into_iter().map(|s| (s, alpha)));
    }
    if let Some((s, _)) = sparse.iter().find(|(s, _)| weights.iter().all(|(n, _)| n != s.name())) {
        return Err(usage(format!("adapter targets unknown tensor `{}`", s.name())));
    }
    for (name, w) in weights.iter_mut() {
        let group: Vec<(&SparseAdapter, f64)> = sparse
            .iter()
            .filter(|(s, _)| s.name() == name)
            .map(|(s, alpha)| (s, *alpha))
            .collect();
        if group.is_empty() {
            continue;
        }
        let (fused, report) = fuse_multi(w, &group)?;
        *w = fused;
        for o in &report.overlaps {
            println!("overlap tensor={name} first={} second={} shared={}", o.first, o.second, o.shared);
        }
        println!("tensor={name} adapters={} touched={}", group.len(), report.touched);
    }
    for p in &a.lora {
        for l in lora_json::load(p)? {
            let slot = weights
                .iter_mut()
                .find(|(n, _)| *n == l.target)
                .ok_or_else(|| usage(format!("LoRA targets unknown tensor `{}`", l.target)))?;
            slot.1 = fuse_lora(&slot.1, &l)?;
            println!("lora tensor={} rank={}", l.target, l.rank());
        }
    }
    save_weights(&weights, cli.out.join(format!("{}.shrw", a.name)))?;
    Ok(())
}

fn ortho(cli: &Cli, a: &OrthoArgs) -> Out {
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let report = simulate(&a.dims, &AdapterStyle::standard(a.sparsity), a.trials, cli.seed, exec)?;
    let primary = OrthoReport::csv(&report.primary());
    write_text(&cli.out.join("ortho.csv"), &primary)?;
    write_text(&cli.out.join("ortho_wm_overlap.csv"), &OrthoReport::csv(&report.wm_overlap()))?;
    print!("{primary}");
    Ok(())
}

fn verify_lemmas(cli: &Cli) -> Out {
    let checks = verify::run_all(cli.seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failed.join(", ")))
    }
}

fn bench_switch(cli: &Cli, a: &BenchArgs) -> Out {
    let report = bench_with(&a.dims, a.density, a.rank, a.repeats, cli.seed, a.cache)?;
    let csv = report.to_csv();
    write_text(&cli.out.join("bench.csv"), &csv)?;
    print!("{csv}");
    println!(
        "cache={:?} pinned={} timer_resolution={:.3e}s",
        report.cache, report.pinned, report.timer_resolution
    );
    if !report.pinned {
        eprintln!("warning: could not pin the timing thread to one CPU");
    }
    if report.resolution_warning {
        eprintln!("warning: some kernels ran for fewer than 100 timer ticks; increase the dimension");
    }
    if a.end_to_end {
        let e = bench_end_to_end(&synthetic_model_shapes(), a.density, a.rank, a.repeats, cli.seed)?;
        let text = format!(
            "tensors,repeats,t_lora_total,t_shira_total,speedup\n{},{},{:e},{:e},{}\n",
            e.tensors,
            e.repeats,
            e.t_lora_total,
            e.t_shira_total,
            sig3(e.speedup)
        );
        write_text(&cli.out.join("bench_end_to_end.csv"), &text)?;
        print!("{text}");
    }
    Ok(())
}
