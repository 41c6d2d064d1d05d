//! Generate the default synthetic phantom and write its files.
//!
//! `cargo run --release --example phantom -- [out_dir]`

use std::path::PathBuf;

use mvseg::mesh::MeshFormat;
use mvseg::phantom::PhantomSpec;
use mvseg::pipeline::cmd_phantom;

fn main() -> mvseg::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("phantom_out"), PathBuf::from);
    let report = cmd_phantom(&PhantomSpec::default(), &out, MeshFormat::StlBinary)?;
    for (name, sha) in &report.artifacts {
        println!("{name:24} {sha}");
    }
    Ok(())
}
