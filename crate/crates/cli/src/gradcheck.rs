use std::fs;
use std::path::PathBuf;

use irlgan_core::gcl::SCHEMA_VERSION;
use irlgan_core::gradcheck::{run_family, Family, FamilyReport, GradcheckOptions};
use serde::Serialize;

use crate::output::write_json;
use crate::{GradcheckArgs, Outcome};

#[derive(Serialize)]
struct GradcheckReport<'a> {
    schema_version: u32,
    options: GradcheckOptions,
    pass: bool,
    families: &'a [FamilyReport],
}

pub fn run(args: &GradcheckArgs, seed: Option<u64>, out: Option<PathBuf>, tol: Option<f64>) -> Outcome {
    let families = match Family::select(&args.component) {
        Ok(f) => f,
        Err(e) => return Outcome::Usage(e.to_string()),
    };
    let opts = GradcheckOptions {
        trials: args.trials,
        h: args.h,
        tol: tol.unwrap_or(GradcheckOptions::default().tol),
        seed: seed.unwrap_or(0),
    };
    if opts.trials == 0 || !(opts.h > 0.0 && opts.h.is_finite()) || opts.tol.is_nan() || opts.tol <= 0.0 {
        return Outcome::Usage("--trials, --h and --tol must be positive".into());
    }

    let mut reports = Vec::new();
    for f in families {
        match run_family(f, &opts) {
            Ok(r) => reports.push(r),
            Err(e) => {
                eprintln!("{}: {e}", f.name());
                return Outcome::Fail;
            }
        }
    }
    for r in &reports {
        println!(
            "{:<22} {:>3} trials {:>3} failures  worst rel {:.2e}  {}",
            r.family.name(),
            r.trials,
            r.failures,
            r.worst.rel_error,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let pass = reports.iter().all(|r| r.pass);
    if let Some(worst) = reports
        .iter()
        .filter(|r| !r.pass)
        .max_by(|a, b| a.worst.rel_error.total_cmp(&b.worst.rel_error))
    {
        let w = &worst.worst;
        println!(
            "worst offender: {} trial {} component {}: analytic {:.12e} numeric {:.12e} rel {:.3e}",
            worst.family.name(),
            w.trial,
            w.index,
            w.analytic,
            w.numeric,
            w.rel_error
        );
        println!("  inputs: {:?}", w.inputs);
        if opts.h < 1e-8 {
            println!(
                "  note: h = {:e} is below the cancellation limit; rounding error ~ eps/h dominates",
                opts.h
            );
        }
    }
    if let Some(dir) = out {
        let path = dir.join("gradcheck.json");
        let report = GradcheckReport {
            schema_version: SCHEMA_VERSION,
            options: opts,
            pass,
            families: &reports,
        };
        if let Err(e) = fs::create_dir_all(&dir).and_then(|_| write_json(&path, &report)) {
            eprintln!("cannot write {}: {e}", path.display());
            return Outcome::Fail;
        }
    }
    if pass {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}
