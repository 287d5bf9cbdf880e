#![allow(dead_code)]

use maskdarts::search::{RunRecord, SearchConfig};
use serde_json::Value;

/// A search small enough for unit-speed integration tests: 8×8 images,
/// 4 classes, 240 samples, three iterations per epoch.
pub fn tiny(seed: u64) -> SearchConfig {
    let mut c = SearchConfig::default();
    for (k, v) in [("data.image_size", "8"), ("data.n", "240"), ("data.classes", "4")] {
        c.set(k, v).unwrap();
    }
    c.c_init = 4;
    c.batch_size = 16;
    c.epochs = 2;
    c.patch_size = 2;
    c.decoder_widths = [8, 8, 8];
    c.seed = seed;
    c
}

/// JSON of a record with every wall-clock field zeroed.
pub fn without_wall_clock(record: &RunRecord) -> String {
    let mut v = serde_json::to_value(record).unwrap();
    zero_wall_clock(&mut v);
    v.to_string()
}

fn zero_wall_clock(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for (k, x) in m.iter_mut() {
                if k == "wall_clock_s" {
                    *x = Value::from(0.0);
                } else {
                    zero_wall_clock(x);
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(zero_wall_clock),
        _ => {}
    }
}

pub fn bits(xs: &[f32]) -> Vec<u32> {
    xs.iter().map(|x| x.to_bits()).collect()
}
