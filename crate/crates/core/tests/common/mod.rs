#![allow(dead_code)]

use nhl::taxonomy::{parse_taxonomy, Taxonomy};
use nhl::topology::{ComputeGraph, GraphBuilder, Shape};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Random taxonomy with leaves at levels 1..=max_depth. Class indices are a
/// random permutation of document order. With `leafless_level1` every
/// level-1 node is internal.
pub fn random_taxonomy(rng: &mut ChaCha8Rng, max_depth: usize, leafless_level1: bool) -> Taxonomy {
    fn node(rng: &mut ChaCha8Rng, level: usize, max_depth: usize, force_internal: bool, leaves: &mut usize) -> Value {
        let internal = level < max_depth && (force_internal || rng.random_bool(0.6));
        if !internal {
            *leaves += 1;
            return json!({ "name": format!("n{}", rng.random::<u32>()), "class_index": Value::Null });
        }
        let k = rng.random_range(1..=3);
        let children: Vec<Value> = (0..k)
            .map(|i| {
                let mut c = node(rng, level + 1, max_depth, false, leaves);
                c["name"] = json!(format!("c{i}"));
                c
            })
            .collect();
        json!({ "name": "g", "children": children })
    }
    let mut leaves = 0;
    let k = rng.random_range(1..=3);
    let children: Vec<Value> = (0..k)
        .map(|i| {
            let mut c = node(rng, 1, max_depth, leafless_level1 && max_depth > 1, &mut leaves);
            c["name"] = json!(format!("top{i}"));
            c
        })
        .collect();
    let mut doc = json!({ "max_levels": max_depth, "root": { "name": "root", "children": children } });
    let mut perm: Vec<usize> = (0..leaves).collect();
    perm.shuffle(rng);
    let mut next = 0;
    fn assign(v: &mut Value, perm: &[usize], next: &mut usize) {
        if let Some(children) = v.get_mut("children").and_then(Value::as_array_mut) {
            for c in children {
                assign(c, perm, next);
            }
        } else {
            v["class_index"] = json!(perm[*next]);
            *next += 1;
        }
    }
    assign(&mut doc["root"], &perm, &mut next);
    parse_taxonomy(&doc.to_string()).expect("generated taxonomy is valid")
}

/// Two-conv trunk used wherever a backbone's size would only slow tests down.
pub fn tiny_trunk(input: Shape, width: usize) -> ComputeGraph {
    let mut g = ComputeGraph::new(input);
    let x = g.input_id().clone();
    let mut b = GraphBuilder::new(&mut g);
    let c1 = b.conv("stem.conv1", &x, input.c, width, 3, 1, 1, false).unwrap();
    let n1 = b.batchnorm("stem.bn1", &c1, width).unwrap();
    let r1 = b.relu("stem.relu1", &n1).unwrap();
    let c2 = b.conv("stem.conv2", &r1, width, width, 3, 1, 1, false).unwrap();
    let n2 = b.batchnorm("stem.bn2", &c2, width).unwrap();
    b.relu("stem.relu2", &n2).unwrap();
    g.with_shapes().unwrap()
}

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}
