//! Write a panel to the long CSV format, read it back, and emit a result
//! table in both output formats.

use serde_json::json;
use surro::cli::{emit_results, ingest_csv, write_panel_csv, Format, Results, Table};
use surro::estimators::{analyze, PteConfig};
use surro::simgen::{generate_panel, GenConfig};

fn main() -> surro::Result<()> {
    let mut g = GenConfig::new(25, 4);
    g.missing = 0.1;
    let (panel, _) = generate_panel(&g)?;
    let dir = std::env::temp_dir().join("surro-csv-roundtrip");
    std::fs::create_dir_all(&dir).map_err(|e| surro::Error::io(e.to_string()))?;

    let path = dir.join("panel.csv");
    write_panel_csv(&panel, &path)?;
    let back = ingest_csv(&path)?;
    assert_eq!(panel, back);
    let text = std::fs::read_to_string(&path).unwrap();
    println!("{}", text.lines().take(4).collect::<Vec<_>>().join("\n"));

    let r = analyze(&back, &PteConfig::default())?.result;
    let results = Results {
        command: "pte".into(),
        seed: None,
        body: json!({ "pte": r.pte, "cpte": r.cpte }),
        table: Table {
            columns: vec!["t".into(), "cpte".into()],
            rows: r.cpte.iter().enumerate().map(|(t, v)| vec![t.to_string(), surro::cli::num(*v)]).collect(),
        },
    };
    emit_results(&results, Format::Json, &dir.join("pte.json"))?;
    emit_results(&results, Format::Csv, &dir.join("pte.csv"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
