//! Writes the learned, gravitational, spring and total potentials on a grid over
//! `[-π, π]²` for surface plots.
//!
//! ```text
//! cargo run --release --example export_potential -- [checkpoint.json] [grid]
//! ```

use std::path::Path;

use modectl::expcli::export_potential;
use modectl::{PendulumParams, PotentialNet};

fn main() -> modectl::Result<()> {
    let mut args = std::env::args().skip(1);
    let net = match args.next() {
        Some(path) => PotentialNet::load(Path::new(&path))?,
        None => PotentialNet::init(256, 0)?,
    };
    let n = args.next().map(|g| g.parse().expect("grid")).unwrap_or(101);
    let out = Path::new("potential.csv");
    export_potential(&PendulumParams::default(), &net, n, out)?;
    println!("wrote {} ({n} x {n} grid)", out.display());
    Ok(())
}
