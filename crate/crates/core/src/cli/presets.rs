//! Named partial configs. Each preset is merged over the defaults and under
//! the user's config file.

use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const PRESETS: [&str; 4] = ["copolymer3d", "copolymer2d-desk", "tumor1d", "spinodal2d"];

/// Tumor parameters at the centers of the sensitivity priors.
fn tumor_model() -> Value {
    json!({
        "variant": {"type": "tumor", "lambda": 0.55, "delta_apop": 0.0055, "chi": 0.255, "diffusivity": 0.55},
        "alpha": 0.5,
        "epsilon": 0.055,
        "potential": {"type": "landau", "c": 1.2625},
        "mobility": {"type": "degenerate", "m": 0.55, "nu": 2.0, "delta": 0.01},
        "grid": {"cells": [200], "extent": [1.0]},
        "dt": 1e-3,
        "final_time": 2.0,
        "initial_phi": {"type": "bump", "center": [0.5], "radius": 0.1, "low": -1.0, "high": 1.0},
        "initial_sigma": 1.0,
        "clip_proliferation": true
    })
}

fn copolymer_model(cells: Vec<usize>, dt: f64, final_time: f64) -> Value {
    let extent: Vec<f64> = vec![1.0; cells.len()];
    json!({
        "variant": {"type": "ohta_kawasaki", "kappa": 100.0},
        "alpha": 0.5,
        "epsilon": 5e-4,
        "potential": {"type": "landau", "c": 0.5},
        "mobility": {"type": "constant", "m": 1.0},
        "grid": {"cells": cells, "extent": extent},
        "dt": dt,
        "final_time": final_time,
        "initial_phi": {"type": "cosine", "mean": 0.4, "amplitude": 0.01, "periods": 1.0},
        "initial_sigma": null,
        "clip_proliferation": false
    })
}

pub fn preset(name: &str) -> Result<Value> {
    let v = match name {
        "copolymer3d" => json!({
            "scale": "paper",
            "model": copolymer_model(vec![128, 128, 128], 1e-4, 0.2),
            "snapshot_times": [0.0, 0.05, 0.1, 0.2]
        }),
        "copolymer2d-desk" => json!({
            "scale": "desk",
            "model": copolymer_model(vec![64, 64], 1e-3, 0.05),
            "snapshot_times": [0.0, 0.05]
        }),
        "tumor1d" => json!({
            "scale": "desk",
            "model": tumor_model(),
            "observables": {"mass": true, "energy": false, "roughness": false}
        }),
        "spinodal2d" => json!({
            "scale": "desk",
            "seed": 7,
            "model": {
                "variant": {"type": "cahn_hilliard"},
                "alpha": 1.0,
                "epsilon": 0.01,
                "potential": {"type": "landau", "c": 0.25},
                "mobility": {"type": "constant", "m": 1.0},
                "grid": {"cells": [64, 64], "extent": [1.0, 1.0]},
                "dt": 1e-3,
                "final_time": 0.5,
                "initial_phi": {"type": "random", "mean": 0.0, "amplitude": 0.05},
                "initial_sigma": null,
                "clip_proliferation": false
            }
        }),
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}`, expected one of {}", PRESETS.join(", ")),
            ))
        }
    };
    Ok(v)
}
