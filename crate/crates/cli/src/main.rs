use std::path::Path;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use surro::cli::{self, Settings};

const MODEL: &[&str] = &[
    "max-lag", "bins", "covariates", "discount", "subject-discount", "discount-intercept",
    "discount-treatment", "discount-surrogate", "kappa",
];
const BOOT: &[&str] = &["b", "level", "seed"];
const GEN: &[&str] = &[
    "n", "years", "t", "scenario", "target", "trajectory", "h1", "h2", "alpha-shape", "df-tau", "v", "w",
    "phi1", "phi2", "beta", "gamma1", "gamma2", "sign", "missing", "gamma-reading", "seed",
];

fn valued(name: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("VALUE").action(ArgAction::Set)
}

fn switch(name: &'static str) -> Arg {
    Arg::new(name).long(name).action(ArgAction::SetTrue)
}

fn sub(name: &'static str, about: &'static str, valued_flags: &[&[&'static str]], switches: &[&'static str]) -> Command {
    let mut c = Command::new(name).about(about);
    let mut seen = Vec::new();
    for &f in valued_flags.iter().flat_map(|g| g.iter()) {
        if !seen.contains(&f) {
            seen.push(f);
            c = c.arg(valued(f));
        }
    }
    for &s in switches {
        c = c.arg(switch(s));
    }
    c
}

fn command() -> Command {
    let panel: &[&str] = &["panel"];
    Command::new("surro")
        .version(env!("CARGO_PKG_VERSION"))
        .about("State-space estimation of the proportion of treatment effect explained by a longitudinal surrogate")
        .subcommand_required(true)
        .arg(valued("config").global(true).help("flat key = value file; flags override it"))
        .arg(valued("out").global(true).help("output directory (default .)"))
        .arg(valued("threads").global(true).help("worker cap (0 = all cores)"))
        .subcommand(sub("simulate", "simulate a two-arm trial: panel.csv plus truth.json", &[GEN], &[]))
        .subcommand(sub("fit", "smoothed state paths of one working model", &[panel, MODEL, &["model"]], &["per-arm"]))
        .subcommand(sub("pte", "Delta, Delta_R, LPTE, CPTE and PTE point estimates", &[panel, MODEL], &["per-arm"]))
        .subcommand(sub(
            "bootstrap",
            "recombination bootstrap intervals and the validity test",
            &[panel, MODEL, BOOT, &["threshold", "alpha"]],
            &["per-arm", "unstratified"],
        ))
        .subcommand(sub(
            "test-homogeneity",
            "MSD test of a time-constant LPTE (and the Wald comparator)",
            &[panel, MODEL, BOOT, &["alpha", "null-draws", "tau-mode"]],
            &["per-arm", "unstratified", "wald"],
        ))
        .subcommand(sub("lag-sweep", "PTE against the number of conditioned surrogate lags", &[panel, MODEL, BOOT, &["max-k"]], &["per-arm", "unstratified"]))
        .subcommand(sub(
            "benchmark",
            "replicated simulation study for the state-space, OLS and Diff estimators",
            &[GEN, MODEL, BOOT, &["reps", "targets", "threshold", "alpha", "methods"]],
            &["per-arm", "unstratified"],
        ))
}

fn flags(m: &ArgMatches) -> Settings {
    let mut s = Settings::default();
    for id in m.ids() {
        let id = id.as_str();
        if id == "config" {
            continue;
        }
        if let Ok(Some(v)) = m.try_get_one::<String>(id) {
            s.set(id, v);
        } else if let Ok(Some(&b)) = m.try_get_one::<bool>(id) {
            if b {
                s.set(id, true);
            }
        }
    }
    s
}

fn main() -> ExitCode {
    let matches = command().get_matches();
    let (name, sm) = matches.subcommand().expect("subcommand required");
    let result = (|| {
        let file = match sm.get_one::<String>("config") {
            Some(p) => Settings::from_file(Path::new(p))?,
            None => Settings::default(),
        };
        let settings = file.merged(&flags(&matches)).merged(&flags(sm));
        cli::run(name, &settings)
    })();
    match result {
        Ok(summary) => {
            for f in &summary.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", cli::error_line(&e));
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn command_is_well_formed() {
        super::command().debug_assert();
    }
}
