use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use tradespace::cli::run;
use tradespace::gravity::read_reports_json;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("tradespace").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Pipeline {
    dir: tempfile::TempDir,
}

impl Pipeline {
    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// synth → ingest → relatedness, leaving everything gravity needs in the temp dir.
    fn build() -> Pipeline {
        let dir = tempfile::tempdir().unwrap();
        let pl = Pipeline { dir };
        let world = pl.p("world");
        assert_eq!(
            cli(&["synth", "--seed", "7", "--n-countries", "25", "--n-products", "15", "--out-dir", s(&world)]),
            0
        );
        assert_eq!(
            cli(&["ingest", "--trade", s(&world.join("trade.csv")), "--out", s(&pl.p("trade.csv"))]),
            0
        );
        assert_eq!(
            cli(&[
                "relatedness",
                "--trade",
                s(&pl.p("trade.csv")),
                "--proximity",
                s(&world.join("proximity.csv")),
                "--dyads",
                s(&world.join("dyads.csv")),
                "--years",
                "2000-2004",
                "--out",
                s(&pl.p("relatedness.csv")),
            ]),
            0
        );
        pl
    }

    fn sample_args(&self) -> Vec<String> {
        let world = self.p("world");
        [
            ("--trade", self.p("trade.csv")),
            ("--relatedness", self.p("relatedness.csv")),
            ("--countries", world.join("countries.csv")),
            ("--dyads", world.join("dyads.csv")),
        ]
        .into_iter()
        .flat_map(|(flag, path)| [flag.to_string(), path.display().to_string()])
        .collect()
    }
}

fn planted(path: &Path) -> BTreeMap<String, f64> {
    let v: serde_json::Value = serde_json::from_reader(File::open(path).unwrap()).unwrap();
    serde_json::from_value(v["planted"].clone()).unwrap()
}

#[test]
fn pipeline_recovers_planted_coefficients() {
    let pl = Pipeline::build();
    let out = pl.p("fit.json");
    let mut args = vec!["gravity".to_string()];
    args.extend(pl.sample_args());
    args.extend(
        ["--split", "none", "--no-standardize", "--period", "2000-2006", "--out", s(&out), "--table", s(&pl.p("table.csv"))]
            .map(String::from),
    );
    assert_eq!(cli(&args.iter().map(String::as_str).collect::<Vec<_>>()), 0);

    let reports = read_reports_json(File::open(&out).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
    let truth = planted(&pl.p("world/planted.json"));
    for c in &reports[0].coefficients {
        let z = (c.beta - truth[&c.name]).abs() / c.se;
        assert!(z < 5.0, "{}: {} vs planted {} (se {})", c.name, c.beta, truth[&c.name], c.se);
    }
    let table = std::fs::read_to_string(pl.p("table.csv")).unwrap();
    assert!(table.starts_with("variable,2000-2006\n"));
    assert!(pl.p("fit.json.manifest.json").exists());
}

#[test]
fn lall_split_writes_five_cells_and_a_trend() {
    let pl = Pipeline::build();
    let out = pl.p("lall.json");
    let trend = pl.p("trend.csv");
    let mut args = vec!["gravity".to_string()];
    args.extend(pl.sample_args());
    args.extend(
        [
            "--split",
            "lall",
            "--concordance",
            s(&pl.p("world/lall.csv")),
            "--period",
            "2000-2006",
            "--out",
            s(&out),
            "--trend",
            s(&trend),
        ]
        .map(String::from),
    );
    assert_eq!(cli(&args.iter().map(String::as_str).collect::<Vec<_>>()), 0);
    let reports = read_reports_json(File::open(&out).unwrap()).unwrap();
    let keys: Vec<&str> = reports.iter().map(|r| r.split_key.as_str()).collect();
    assert_eq!(keys, ["PP", "RB", "LT", "MT", "HT"]);
    let text = std::fs::read_to_string(&trend).unwrap();
    assert!(text.starts_with("variable,slope,se,p,significant\n"));
    assert_eq!(text.lines().count(), 17);

    let again = pl.p("trend_again.csv");
    assert_eq!(cli(&["trend", "--regressions", s(&out), "--out", s(&again)]), 0);
    assert_eq!(text, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn summary_statistics_and_correlations() {
    let pl = Pipeline::build();
    let mut args = vec!["summary".to_string()];
    args.extend(pl.sample_args());
    args.extend(["--out", s(&pl.p("summary.csv")), "--correlation", s(&pl.p("corr.csv"))].map(String::from));
    assert_eq!(cli(&args.iter().map(String::as_str).collect::<Vec<_>>()), 0);
    let summary = std::fs::read_to_string(pl.p("summary.csv")).unwrap();
    assert!(summary.starts_with("statistic,n,mean,st_dev,min,max,zero_variance\n"));
    assert_eq!(summary.lines().count(), 17);
    assert_eq!(std::fs::read_to_string(pl.p("corr.csv")).unwrap().lines().count(), 16);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["rca", "--no-such-flag"]), 2);
    assert_eq!(cli(&["gravity", "--split", "sideways"]), 2);
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("rca.csv");
    assert_eq!(cli(&["rca", "--trade", s(&missing), "--out", s(&out)]), 1);
    assert_eq!(cli(&["--threads", "0", "rca", "--trade", s(&missing), "--out", s(&out)]), 2);
    assert_eq!(
        cli(&["ingest", "--trade", s(&missing), "--out", s(&out), "--filter"]),
        2,
        "--filter without --countries is a usage error"
    );
}

#[test]
fn thread_count_does_not_change_outputs() {
    let pl = Pipeline::build();
    let world = pl.p("world");
    let (trade, proximity, dyads) = (pl.p("trade.csv"), world.join("proximity.csv"), world.join("dyads.csv"));
    let run_with = |threads: Option<&str>, out: &Path| {
        let mut args = Vec::new();
        if let Some(t) = threads {
            args.extend(["--threads", t]);
        }
        args.extend([
            "relatedness",
            "--trade",
            s(&trade),
            "--proximity",
            s(&proximity),
            "--dyads",
            s(&dyads),
            "--out",
            s(out),
        ]);
        assert_eq!(cli(&args), 0);
        std::fs::read(out).unwrap()
    };
    let one = run_with(Some("1"), &pl.p("rel1.csv"));
    let three = run_with(Some("3"), &pl.p("rel3.csv"));
    let default = run_with(None, &pl.p("rel_default.csv"));
    assert_eq!(one, three);
    assert_eq!(one, default);
}

#[test]
fn command_line_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[synth]\nseed = 5\nn-countries = 6\n").unwrap();
    let synth = |extra: &[&str], out: &str| {
        let out = dir.path().join(out);
        let mut args = extra.to_vec();
        args.extend(["synth", "--n-countries", "6", "--out-dir", s(&out)]);
        assert_eq!(cli(&args), 0);
        std::fs::read(out.join("trade.csv")).unwrap()
    };
    let from_config = synth(&["--config", s(&config)], "a");
    let plain_seed_5 = {
        let out = dir.path().join("b");
        assert_eq!(cli(&["synth", "--seed", "5", "--n-countries", "6", "--out-dir", s(&out)]), 0);
        std::fs::read(out.join("trade.csv")).unwrap()
    };
    assert_eq!(from_config, plain_seed_5);

    let out = dir.path().join("c");
    assert_eq!(
        cli(&["--config", s(&config), "synth", "--seed", "42", "--out-dir", s(&out)]),
        0
    );
    let overridden = std::fs::read(out.join("trade.csv")).unwrap();
    let default_seed = synth(&[], "d");
    assert_eq!(overridden, default_seed);
    assert_ne!(overridden, from_config);
}
