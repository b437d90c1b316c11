// SPDX-License-Identifier: Apache-2.0

use preroute_demo::{encoding_table, lut_surface, partition_view};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn encoding_rows_cover_every_level() {
    let v = parse(encoding_table(3, 10));
    assert_eq!(v["rows"].as_array().unwrap().len(), 11);
    assert_eq!(v["labels"].as_array().unwrap().len(), 7);
    assert_eq!(v["rows"][10][0], 10.0);
}

#[test]
fn invalid_encoding_is_an_error_object() {
    assert!(parse(encoding_table(0, 10))["error"].is_string());
}

#[test]
fn surface_passes_through_the_table_corners() {
    let v = parse(lut_surface(1, 5, 0, false, 9));
    let table = &v["table"];
    let grid = &v["grid"];
    assert_eq!(grid[0][0], table[0][0]);
    assert_eq!(grid[8][8], table[4][4]);
}

#[test]
fn partition_cores_add_up_to_the_circuit() {
    let v = parse(partition_view(2, 500, 0.2, 80, 2));
    let total: u64 = v["pieces"].as_array().unwrap().iter().map(|p| p["core"].as_u64().unwrap()).sum();
    assert_eq!(total, v["nodes"].as_u64().unwrap());
}
