use std::io::Write;

use crate::{GaussianCloud, Result};

/// Zeroth-order spherical harmonic constant used to store RGB as `f_dc`.
pub const PLY_SH_C0: f64 = 0.282_094_791_773_878_14;

const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Writes the splat PLY layout read by common Gaussian splatting viewers:
/// ASCII header, binary little-endian float32 rows, colors as SH DC terms,
/// opacity as a logit and scales as logarithms.
pub fn write_ply<W: Write>(cloud: &GaussianCloud, mut out: W) -> Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    for p in PROPERTIES {
        writeln!(out, "property float {p}")?;
    }
    writeln!(out, "end_header")?;
    let mut row = Vec::with_capacity(PROPERTIES.len() * 4);
    for i in 0..cloud.len() {
        row.clear();
        let op = cloud.opacities[i].clamp(1e-6, 1.0 - 1e-6);
        let values = [
            cloud.positions[i][0],
            cloud.positions[i][1],
            cloud.positions[i][2],
            0.0,
            0.0,
            0.0,
            (cloud.colors[i][0] - 0.5) / PLY_SH_C0,
            (cloud.colors[i][1] - 0.5) / PLY_SH_C0,
            (cloud.colors[i][2] - 0.5) / PLY_SH_C0,
            (op / (1.0 - op)).ln(),
            cloud.scales[i][0].ln(),
            cloud.scales[i][1].ln(),
            cloud.scales[i][2].ln(),
            cloud.rotations[i][0],
            cloud.rotations[i][1],
            cloud.rotations[i][2],
            cloud.rotations[i][3],
        ];
        for v in values {
            row.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&row)?;
    }
    Ok(())
}
