//! Writes the four-subsystem benchmark as CLI input files.
//!
//! `cargo run --example write_case_study -- DIR [d]`

use std::fs;
use std::path::PathBuf;

use jlssabs::case_study;
use jlssabs::cli::InitialStates;
use jlssabs::matrix_serde;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "case_study".to_string()));
    let d: f64 = args.next().map_or(0.5, |s| s.parse().expect("d must be a number"));
    fs::create_dir_all(&dir).expect("create output directory");

    let net = case_study::network(d);
    fs::write(dir.join("network.json"), net.to_json()).expect("write network");
    for s in &net.subsystems {
        let p = matrix_serde::to_rows(&case_study::p_matrix(s.id));
        let text = serde_json::to_string(&p).expect("P serializes");
        fs::write(dir.join(format!("p{}.json", s.id)), text).expect("write P");
    }
    let to_rows = |v: Vec<jlssabs::linalg::Vector>| v.iter().map(|x| x.iter().copied().collect()).collect();
    let init = InitialStates {
        x: to_rows(case_study::initial_state()),
        x_hat: to_rows(case_study::initial_abstract_state()),
    };
    fs::write(dir.join("init.json"), serde_json::to_string_pretty(&init).expect("init serializes")).expect("write init");
    let inputs = case_study::input_trajectory(7, 15.0);
    fs::write(dir.join("inputs.csv"), inputs.to_csv()).expect("write inputs");
    println!("wrote {}", dir.display());
}
