use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use lfn_core::flowio::{aee, colorize, fl_all, load_weights, read_flo, read_image, write_flo, write_png, write_weights};
use lfn_core::pipeline::{
    evaluate_aee, make_synthetic_dataset, module_parameter_counts, train_toy as run_training, SyntheticOptions,
};
use lfn_core::selfcheck::{op_gradient_suite, oracle_suite, run_all, CheckResult, SuiteOptions};
use lfn_core::{forward, pad_to_multiple, FlowField, ImagePair, ModelConfig, ModelWeights, RunConfig};
use serde_json::json;

use crate::{Failure, ModelArgs};

/// Configuration file (if any) over `base`, then the flag overrides.
fn run_config(args: &ModelArgs, base: RunConfig) -> Result<RunConfig, Failure> {
    let mut run = match &args.config {
        Some(path) => RunConfig::load_over(base, path)?,
        None => base,
    };
    if let Some(w) = args.width_scale {
        run.model.width_scale = w;
    }
    if let Some(s) = args.seed {
        run.model.seed = s;
    }
    run.model.validate()?;
    run.train.validate()?;
    Ok(run)
}

fn model_config(args: &ModelArgs) -> Result<ModelConfig, Failure> {
    Ok(run_config(args, RunConfig::default())?.model)
}

#[allow(clippy::too_many_arguments)]
pub fn estimate(
    img1: &Path,
    img2: &Path,
    out: &Path,
    weights: Option<&Path>,
    args: &ModelArgs,
    viz: Option<&Path>,
    pad: bool,
    json: bool,
) -> Result<(), Failure> {
    let cfg = model_config(args)?;
    let (a, b) = (read_image(img1)?, read_image(img2)?);
    if a.shape() != b.shape() {
        return Err(Failure::invalid(format!(
            "{} is {:?} but {} is {:?}",
            img1.display(),
            a.shape(),
            img2.display(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let pair = if pad { ImagePair::new(pad_to_multiple(&a)?, pad_to_multiple(&b)?)? } else { ImagePair::new(a, b)? };
    let weights = match weights {
        Some(path) => load_weights(path, &cfg)?,
        None => {
            eprintln!("warning: no --weights given; running the untrained initialization");
            ModelWeights::init(&cfg)
        }
    };
    let start = Instant::now();
    let est = forward(&pair, &weights, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let flow = if pad { est.flow.crop(h, w)? } else { est.flow };
    write_flo(out, &flow)?;
    if let Some(path) = viz {
        write_png(path, &colorize(&flow, None))?;
    }
    if json {
        println!("{}", json!({ "out": out.display().to_string(), "width": w, "height": h, "seconds": seconds }));
    } else {
        println!("wrote {} ({w}x{h}) in {:.3} s", out.display(), seconds);
    }
    Ok(())
}

fn read_mask(path: &Path, flow: &FlowField) -> Result<Vec<bool>, Failure> {
    let img = read_image(path)?;
    let (_, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) != (flow.height(), flow.width()) {
        return Err(Failure::invalid(format!(
            "mask {} is {w}x{h}, flow is {}x{}",
            path.display(),
            flow.width(),
            flow.height()
        )));
    }
    let plane = h * w;
    Ok((0..plane).map(|p| (0..3).any(|c| img.data()[c * plane + p] > 0.5)).collect())
}

pub fn eval(est: &Path, gt: &Path, mask: Option<&Path>, viz: Option<&Path>, json: bool) -> Result<(), Failure> {
    let (e, g) = (read_flo(est)?, read_flo(gt)?);
    let mask = mask.map(|m| read_mask(m, &g)).transpose()?;
    let avg = aee(&e, &g, mask.as_deref())?;
    let fl = fl_all(&e, &g, mask.as_deref())?;
    if let Some(path) = viz {
        write_png(path, &colorize(&e, None))?;
    }
    let pixels = mask.as_ref().map_or(g.height() * g.width(), |m| m.iter().filter(|&&v| v).count());
    if json {
        println!("{}", json!({ "aee": avg, "fl_all": fl, "pixels": pixels }));
    } else {
        println!("AEE {avg:.3}, Fl-all {fl:.2}%");
    }
    Ok(())
}

pub fn train_toy(out: &Path, args: &ModelArgs, iterations: Option<usize>, json: bool) -> Result<(), Failure> {
    let mut run = run_config(args, RunConfig::toy())?;
    if let Some(n) = iterations {
        run.train.iterations_per_stage = n;
    }
    let t = &run.train;
    let data = make_synthetic_dataset(&SyntheticOptions {
        count: t.train_samples + t.heldout_samples,
        size: t.image_size,
        max_displacement: t.max_displacement,
        piecewise: t.piecewise,
        seed: t.data_seed,
    })?;
    let (train, heldout) = data.split_at(t.train_samples);
    std::fs::create_dir_all(out).map_err(|e| Failure { code: 1, message: format!("{}: {e}", out.display()) })?;

    let start = Instant::now();
    let mut csv = String::from("stage,iteration,global_iteration,lr,loss\n");
    let outcome = run_training(train, &run.model, t, |r| {
        let _ = writeln!(csv, "{},{},{},{},{}", r.stage, r.iteration, r.global_iteration, r.lr, r.loss);
        if r.iteration % 100 == 0 {
            eprintln!("stage {} iteration {} loss {:.4} ({:.0} s)", r.stage, r.iteration, r.loss, start.elapsed().as_secs_f64());
        }
    })?;
    let seconds = start.elapsed().as_secs_f64();

    let write = |name: &str, bytes: &[u8]| {
        let path = out.join(name);
        std::fs::write(&path, bytes).map_err(|e| Failure { code: 1, message: format!("{}: {e}", path.display()) })
    };
    write("loss.csv", csv.as_bytes())?;
    write("config.txt", run.to_text().as_bytes())?;
    write_weights(&out.join("weights.lfnw"), &outcome.weights)?;

    let mut report = json!({ "out": out.display().to_string(), "seconds": seconds, "iterations": outcome.curve.len() });
    if let Some(first) = heldout.first() {
        let mean = evaluate_aee(&outcome.weights, &run.model, heldout)?;
        let est = forward(&first.pair, &outcome.weights, &run.model)?;
        write_flo(&out.join("heldout0_est.flo"), &est.flow)?;
        write_flo(&out.join("heldout0_gt.flo"), &first.flow)?;
        let single = aee(&est.flow, &first.flow, None)?;
        report["heldout_aee"] = json!(mean);
        report["heldout0_aee"] = json!(single);
        if !json {
            println!("held-out AEE {mean:.3} over {} samples", heldout.len());
            println!("heldout0 AEE {single:.3}");
        }
    }
    if json {
        println!("{report}");
    } else {
        println!("trained {} iterations in {seconds:.1} s; wrote {}", outcome.curve.len(), out.display());
    }
    Ok(())
}

fn print_checks(results: &[CheckResult], json: bool) {
    for r in results {
        if json {
            println!("{}", json!({ "name": r.name, "passed": r.passed, "worst": r.worst, "tolerance": r.tolerance }));
        } else {
            let status = if r.passed { "PASS" } else { "FAIL" };
            println!("{status}  {:<48} worst {:.3e}  tol {:.0e}", r.name, r.worst, r.tolerance);
        }
    }
}

pub fn selfcheck(quick: bool, seeds: Vec<u64>, json: bool, inject_fault: Option<String>) -> Result<(), Failure> {
    let opts = SuiteOptions { inject_fault, seeds };
    let results = if quick {
        let mut r = op_gradient_suite(&opts);
        r.extend(oracle_suite(&opts));
        r
    } else {
        run_all(&opts)
    };
    print_checks(&results, json);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 3, message: format!("{} check(s) failed: {}", failed.len(), failed.join(", ")) })
    }
}

pub fn params(args: &ModelArgs, json: bool) -> Result<(), Failure> {
    let cfg = model_config(args)?;
    let counts = module_parameter_counts(&cfg);
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    if json {
        let modules: Vec<_> = counts.iter().map(|(name, n)| json!({ "module": name, "params": n })).collect();
        println!("{}", json!({ "modules": modules, "total": total }));
    } else {
        for (name, n) in &counts {
            println!("{name:<6} {n:>9}");
        }
        println!("{:<6} {total:>9} ({:.2}M)", "total", total as f64 / 1e6);
    }
    Ok(())
}
