//! Feature-map dumps: absolute-value matrices as 8-bit grayscale PGM images
//! and the share of squared mass on the main diagonal.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use smsa_core::network::{model_fwd, ModelState, NetworkConfig};
use smsa_core::{Mat, SpdMatrix};

use crate::error::{CliError, CliResult};

pub const ENERGY_FILE: &str = "diagonal_energy.csv";

/// `Σ diag² / Σ all²`; 0 for the zero matrix.
pub fn diagonal_energy(m: &Mat) -> f64 {
    let total = m.frobenius_sq();
    if total == 0.0 {
        return 0.0;
    }
    m.diagonal().iter().map(|d| d * d).sum::<f64>() / total
}

/// Pixels of `|m|` scaled linearly so the largest entry is 255, each entry
/// drawn as a `scale`×`scale` block. Returns (width, height, pixels).
pub fn render_gray(m: &Mat, scale: usize) -> (u32, u32, Vec<u8>) {
    let scale = scale.max(1);
    let max = m.max_abs();
    let (rows, cols) = m.shape();
    let (w, h) = (cols * scale, rows * scale);
    let mut px = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = m[(y / scale, x / scale)].abs();
            px[y * w + x] = if max > 0.0 {
                (255.0 * v / max).round() as u8
            } else {
                0
            };
        }
    }
    (w as u32, h as u32, px)
}

pub fn write_pgm(path: &Path, m: &Mat, scale: usize) -> CliResult<()> {
    let (w, h, px) = render_gray(m, scale);
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&px, w, h, ExtendedColorType::L8)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// Matrices available for dumping: index 0 is the backbone output, `e` in
/// `1..=E` is stage `e`'s output (the attention output at its stage).
pub fn stage_maps(x: &SpdMatrix, state: &ModelState, net: &NetworkConfig) -> CliResult<Vec<Mat>> {
    let trace = model_fwd(x, state, net)?;
    let mut maps = vec![trace.r.as_mat().clone()];
    maps.extend(trace.stage_out.iter().map(|s| s.as_mat().clone()));
    Ok(maps)
}

/// Writes `stage{e}.pgm` for each requested stage and one energy row per
/// stage to `diagonal_energy.csv` under `out`. Returns the image paths.
pub fn dump(maps: &[Mat], stages: &[usize], out: &Path, scale: usize) -> CliResult<Vec<PathBuf>> {
    if let Some(&bad) = stages.iter().find(|&&s| s >= maps.len()) {
        return Err(CliError::config(
            "stages",
            format!(
                "stage {bad} out of range (0 is the backbone output, 1..={} the stages)",
                maps.len() - 1
            ),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let energy = out.join(ENERGY_FILE);
    let mut w = csv::Writer::from_path(&energy)
        .map_err(|e| CliError::Failed(format!("{}: {e}", energy.display())))?;
    let csv_err = |e: csv::Error| CliError::Failed(format!("{}: {e}", energy.display()));
    w.write_record(["stage", "dim", "diagonal_energy"])
        .map_err(csv_err)?;
    let mut paths = Vec::new();
    for &s in stages {
        let path = out.join(format!("stage{s}.pgm"));
        write_pgm(&path, &maps[s], scale)?;
        w.write_record([
            s.to_string(),
            maps[s].rows().to_string(),
            diagonal_energy(&maps[s]).to_string(),
        ])
        .map_err(csv_err)?;
        paths.push(path);
    }
    w.flush().map_err(|e| CliError::io(&energy, e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_all_diagonal() {
        let m = Mat::identity(4);
        assert_eq!(diagonal_energy(&m), 1.0);
        let (w, h, px) = render_gray(&m, 1);
        assert_eq!((w, h), (4, 4));
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(px[y * 4 + x], if x == y { 255 } else { 0 });
            }
        }
    }

    #[test]
    fn energy_is_a_ratio() {
        let m = Mat::from_rows(&[&[1.0, -3.0], &[-3.0, 2.0]]);
        let e = diagonal_energy(&m);
        assert!((e - 5.0 / 23.0).abs() < 1e-15);
        assert_eq!(diagonal_energy(&Mat::zeros(3, 3)), 0.0);
    }

    #[test]
    fn pgm_header_and_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_pgm(&path, &Mat::from_rows(&[&[2.0, -1.0], &[-1.0, 2.0]]), 3).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        let img = image::open(&path).unwrap().into_luma8();
        assert_eq!(img.dimensions(), (6, 6));
        assert_eq!(img.get_pixel(0, 0).0[0], 255);
        assert_eq!(img.get_pixel(3, 0).0[0], 128);
    }

    #[test]
    fn out_of_range_stage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = dump(&[Mat::identity(2)], &[1], dir.path(), 1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
