//! CSV rate tables and legacy VTK snapshots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fem::MixedSpace;
use crate::mms::{RateRow, RateTable};

pub const RATE_TABLE_HEADER: &str = "h,dt,err_v,rate_v,err_w,rate_w";

/// Six significant digits.
fn sig6(x: f64) -> String {
    format!("{x:.5e}")
}

pub fn format_rate_table(table: &RateTable) -> String {
    let mut out = String::from(RATE_TABLE_HEADER);
    out.push('\n');
    let rate = |r: Option<f64>| r.map(sig6).unwrap_or_default();
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            sig6(r.h),
            sig6(r.dt),
            sig6(r.err_v),
            rate(r.rate_v),
            sig6(r.err_w),
            rate(r.rate_w)
        );
    }
    out
}

pub fn emit_rate_table(table: &RateTable, path: &Path) -> Result<()> {
    if table.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty rate table".into()));
    }
    fs::write(path, format_rate_table(table))?;
    Ok(())
}

pub fn parse_rate_table(text: &str) -> Result<RateTable> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == RATE_TABLE_HEADER => {}
        other => return Err(Error::Config(format!("unexpected rate table header {other:?}"))),
    }
    let num = |s: &str| -> Result<f64> {
        s.trim().parse::<f64>().map_err(|_| Error::Config(format!("not a number in rate table: {s:?}")))
    };
    let opt = |s: &str| -> Result<Option<f64>> { if s.trim().is_empty() { Ok(None) } else { num(s).map(Some) } };
    let rows = lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!("rate table row needs 6 fields: {line:?}")));
            }
            Ok(RateRow {
                h: num(f[0])?,
                dt: num(f[1])?,
                err_v: num(f[2])?,
                rate_v: opt(f[3])?,
                err_w: num(f[4])?,
                rate_w: opt(f[5])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RateTable { rows })
}

/// A point field on the Q2 nodes.
#[derive(Clone, Copy, Debug)]
pub enum VtkField<'a> {
    /// Velocity DOF vector (component-major).
    Velocity(&'a [f64]),
    /// One value per Q2 node.
    Scalar(&'a [f64]),
}

/// Legacy ASCII unstructured grid of biquadratic quads.
pub fn format_vtk(space: &MixedSpace, title: &str, fields: &[(&str, VtkField<'_>)]) -> Result<String> {
    let n = space.n_nodes();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{}", title.lines().next().unwrap_or(""));
    let _ = writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {n} double");
    for p in space.node_coords() {
        let _ = writeln!(s, "{} {} 0", p[0], p[1]);
    }
    let cells = space.cell_nodes();
    let _ = writeln!(s, "CELLS {} {}", cells.len(), cells.len() * 10);
    for c in cells {
        // local node order already matches VTK_BIQUADRATIC_QUAD
        let ids: Vec<String> = c.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "9 {}", ids.join(" "));
    }
    let _ = writeln!(s, "CELL_TYPES {}", cells.len());
    for _ in cells {
        let _ = writeln!(s, "28");
    }
    let _ = writeln!(s, "POINT_DATA {n}");
    for (name, field) in fields {
        match field {
            VtkField::Velocity(u) => {
                space.check_velocity_len(u)?;
                let _ = writeln!(s, "VECTORS {name} double");
                for i in 0..n {
                    let _ = writeln!(s, "{} {} 0", u[i], u[n + i]);
                }
            }
            VtkField::Scalar(v) => {
                if v.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: v.len() });
                }
                let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
                for x in *v {
                    let _ = writeln!(s, "{x}");
                }
            }
        }
    }
    Ok(s)
}

pub fn write_vtk(path: &Path, space: &MixedSpace, title: &str, fields: &[(&str, VtkField<'_>)]) -> Result<()> {
    fs::write(path, format_vtk(space, title, fields)?)?;
    Ok(())
}
