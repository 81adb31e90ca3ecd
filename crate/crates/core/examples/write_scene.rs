//! Writes the built-in static room as a TOML scene file.
//!
//! `cargo run --example write_scene -- room.toml [frames] [revolutions] [height] [width]`

use cog3dmap::SceneSpec;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first() else {
        eprintln!("usage: write_scene OUT.toml [frames] [revolutions] [height] [width]");
        std::process::exit(1);
    };
    let num = |i: usize, default: f64| args.get(i).map_or(default, |s| s.parse().expect("numeric argument"));
    let spec = SceneSpec::static_room(num(1, 64.0) as usize, num(2, 2.0), num(3, 96.0) as usize, num(4, 128.0) as usize);
    std::fs::write(out, toml::to_string(&spec).expect("scene serializes")).expect("write scene file");
}
