// SPDX-License-Identifier: Apache-2.0

//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string so the page needs no generated
//! TypeScript types. Errors are returned as `{"error": "..."}`.

use preroute::datagen::{gen_circuit, GenConfig};
use preroute::level::{level_encoding, topo_levels};
use preroute::partition::{partition, NodeRole, PartitionConfig};
use preroute::sta::{lut_lookup, LutTable};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: preroute::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
struct EncodingView {
    /// One row per level `0..=max_level`.
    rows: Vec<Vec<f64>>,
    labels: Vec<String>,
}

/// Level encoding of every level up to `max_level` with `n_freq` frequencies.
#[wasm_bindgen]
pub fn encoding_table(n_freq: usize, max_level: usize) -> String {
    respond((|| {
        let rows = (0..=max_level)
            .map(|x| level_encoding(x, n_freq, max_level))
            .collect::<preroute::Result<Vec<_>>>()?;
        let mut labels = vec!["x".to_string()];
        for i in 0..n_freq {
            labels.push(format!("sin {}", 1u64 << i));
            labels.push(format!("cos {}", 1u64 << i));
        }
        Ok(EncodingView { rows, labels })
    })())
}

#[derive(Serialize)]
struct SurfaceView {
    rows: Vec<f64>,
    cols: Vec<f64>,
    /// Breakpoint table.
    table: Vec<Vec<f64>>,
    /// Interpolated grid over `[rows.first, rows.last] x [cols.first, cols.last]`.
    grid: Vec<Vec<f64>>,
    luts: usize,
}

/// A LUT from a generated library, with its bilinear surface sampled on a
/// `resolution x resolution` grid. `slew` selects the output-slew table.
#[wasm_bindgen]
pub fn lut_surface(seed: u64, grid: usize, lut_index: usize, slew: bool, resolution: usize) -> String {
    respond((|| {
        let g = gen_circuit(&GenConfig {
            seed,
            n_nodes: 40,
            lut_grid: [grid, grid],
            library_size: 8,
            ..GenConfig::default()
        })?;
        let luts = g.luts.len();
        let lut = g
            .luts
            .values()
            .nth(lut_index % luts.max(1))
            .ok_or_else(|| preroute::Error::InvalidArgument("library is empty".into()))?;
        let which = if slew { LutTable::Slew } else { LutTable::Delay };
        let res = resolution.clamp(2, 200);
        let span = |axis: &[f64], i: usize| axis[0] + (axis[axis.len() - 1] - axis[0]) * i as f64 / (res - 1) as f64;
        let grid = (0..res)
            .map(|i| {
                (0..res)
                    .map(|j| lut_lookup(lut, which, span(&lut.row_axis, i), span(&lut.col_axis, j)))
                    .collect()
            })
            .collect();
        Ok(SurfaceView {
            rows: lut.row_axis.clone(),
            cols: lut.col_axis.clone(),
            table: if slew { lut.slew_table.clone() } else { lut.delay_table.clone() },
            grid,
            luts,
        })
    })())
}

#[derive(Serialize)]
struct PieceView {
    core_levels: [usize; 2],
    pad_before: [usize; 2],
    pad_after: [usize; 2],
    core: usize,
    padding: usize,
    halo: usize,
}

#[derive(Serialize)]
struct PartitionView {
    nodes: usize,
    level_sizes: Vec<usize>,
    pieces: Vec<PieceView>,
}

/// Generates a circuit and partitions it with core budget `max_size` and
/// `pad` padding levels.
#[wasm_bindgen]
pub fn partition_view(seed: u64, n_nodes: usize, depth_bias: f64, max_size: usize, pad: usize) -> String {
    respond((|| {
        let g = gen_circuit(&GenConfig {
            seed,
            n_nodes,
            depth_bias,
            ..GenConfig::default()
        })?;
        let schedule = topo_levels(&g)?;
        let parts = partition(
            &g,
            &schedule,
            &PartitionConfig {
                split_oversized: true,
                ..PartitionConfig::new(max_size, pad)
            },
        )?;
        let count = |roles: &[NodeRole], r: NodeRole| roles.iter().filter(|&&x| x == r).count();
        let pieces = parts
            .iter()
            .map(|p| PieceView {
                core_levels: [p.core_levels.start, p.core_levels.end],
                pad_before: [p.pad_levels_before.start, p.pad_levels_before.end],
                pad_after: [p.pad_levels_after.start, p.pad_levels_after.end],
                core: p.num_core(),
                padding: count(&p.role, NodeRole::PadBefore) + count(&p.role, NodeRole::PadAfter),
                halo: count(&p.role, NodeRole::Halo),
            })
            .collect();
        Ok(PartitionView {
            nodes: g.num_nodes(),
            level_sizes: schedule.levels.iter().map(Vec::len).collect(),
            pieces,
        })
    })())
}
