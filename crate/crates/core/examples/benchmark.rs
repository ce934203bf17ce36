//! Times single-image inference for the default and desk configurations.

use handmesh::cli::{bench_command, bench_text};
use handmesh::config::RunConfig;

fn main() -> handmesh::Result<()> {
    for (name, cfg) in [("default", RunConfig::default()), ("desk", RunConfig::desk())] {
        println!("[{name}]");
        print!("{}", bench_text(&bench_command(&cfg, None)?));
    }
    Ok(())
}
