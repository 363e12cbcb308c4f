use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::phenotype::{cavity_semi_axis, shell_volume_ml, PhenotypeVector, LONG_AXIS_RATIO};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const N_SLICES: usize = 6;

const MYOCARDIUM: f64 = 1.0;
const CAVITY: f64 = 0.2;
const BACKGROUND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ed,
    Es,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::Ed, Phase::Es];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Ed => "ed",
            Phase::Es => "es",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ed" => Ok(Phase::Ed),
            "es" => Ok(Phase::Es),
            other => Err(Error::invalid(format!("unknown phase {other:?}, expected ed or es"))),
        }
    }
}

/// In-plane box in mm, measured from the image corner. Pixel `i` spans
/// `[i * pixel_mm, (i + 1) * pixel_mm)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub y0: f64,
    pub y1: f64,
    pub x0: f64,
    pub x1: f64,
}

impl BBox {
    pub fn is_empty(&self) -> bool {
        !(self.y1 >= self.y0 && self.x1 >= self.x0)
    }

    fn shifted(&self, dy: f64, dx: f64) -> BBox {
        BBox {
            y0: self.y0 + dy,
            y1: self.y1 + dy,
            x0: self.x0 + dx,
            x1: self.x1 + dx,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmrVolume<T: Scalar> {
    /// `[6, H, W]`
    pub intensities: Tensor<T>,
    pub phase: Phase,
    pub pixel_mm: f64,
    pub slice_mm: f64,
    pub bbox: BBox,
}

impl<T: Scalar> CmrVolume<T> {
    pub fn height(&self) -> usize {
        self.intensities.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.intensities.shape()[2]
    }

    pub fn voxel_mm3(&self) -> f64 {
        self.pixel_mm * self.pixel_mm * self.slice_mm
    }

    pub fn save(&self, dir: &Path, stem: &str, dtype: DType) -> Result<()> {
        write_tensor(&dir.join(format!("{stem}.calt")), &self.intensities, dtype)?;
        let b = &self.bbox;
        let meta = format!(
            "phase={}\npixel_mm={}\nslice_mm={}\nbbox={},{},{},{}\n",
            self.phase, self.pixel_mm, self.slice_mm, b.y0, b.y1, b.x0, b.x1
        );
        let path = dir.join(format!("{stem}.meta"));
        fs::write(&path, meta).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let intensities: Tensor<T> = read_tensor(&dir.join(format!("{stem}.calt")))?;
        let path = dir.join(format!("{stem}.meta"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut phase = None;
        let (mut pixel_mm, mut slice_mm, mut bbox) = (None, None, None);
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| Error::format(&path, format!("not a number: {v:?}")))
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&path, format!("not key=value: {line:?}")))?;
            match k.trim() {
                "phase" => phase = Some(v.parse()?),
                "pixel_mm" => pixel_mm = Some(num(v)?),
                "slice_mm" => slice_mm = Some(num(v)?),
                "bbox" => {
                    let parts = v.split(',').map(num).collect::<Result<Vec<_>>>()?;
                    if parts.len() != 4 {
                        return Err(Error::format(&path, "bbox needs four values"));
                    }
                    bbox = Some(BBox {
                        y0: parts[0],
                        y1: parts[1],
                        x0: parts[2],
                        x1: parts[3],
                    });
                }
                _ => {}
            }
        }
        let missing = |what: &str| Error::format(&path, format!("missing {what}"));
        if intensities.rank() != 3 || intensities.shape()[0] != N_SLICES {
            return Err(Error::format(&path, format!("volume shape {:?}", intensities.shape())));
        }
        Ok(Self {
            intensities,
            phase: phase.ok_or_else(|| missing("phase"))?,
            pixel_mm: pixel_mm.ok_or_else(|| missing("pixel_mm"))?,
            slice_mm: slice_mm.ok_or_else(|| missing("slice_mm"))?,
            bbox: bbox.ok_or_else(|| missing("bbox"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmrRenderConfig {
    pub image_hw: usize,
    pub pixel_mm: f64,
    pub slice_mm: f64,
    pub noise_sd: f64,
    pub max_offset_mm: f64,
}

impl Default for CmrRenderConfig {
    fn default() -> Self {
        Self {
            image_hw: 64,
            pixel_mm: 2.0,
            slice_mm: 20.0,
            noise_sd: 0.05,
            max_offset_mm: 4.0,
        }
    }
}

/// Ellipsoid cavity with semi-axes `(a, a, LONG_AXIS_RATIO * a)` wrapped in
/// a shell of thickness `t`, centred at `(cy, cx)` mm in-plane and midway
/// through the slice stack.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    a: f64,
    b: f64,
    c: f64,
    t: f64,
    cy: f64,
    cx: f64,
}

impl Geometry {
    fn slice_z(k: usize, cfg: &CmrRenderConfig) -> f64 {
        (k as f64 - (N_SLICES as f64 - 1.0) / 2.0) * cfg.slice_mm
    }

    fn pixel_mm(i: usize, cfg: &CmrRenderConfig) -> f64 {
        (i as f64 + 0.5) * cfg.pixel_mm
    }

    fn inside(dy: f64, dx: f64, z: f64, a: f64, b: f64, c: f64) -> bool {
        (dy / a).powi(2) + (dx / b).powi(2) + (z / c).powi(2) <= 1.0
    }

    fn label(&self, k: usize, i: usize, j: usize, cfg: &CmrRenderConfig) -> f64 {
        let z = Self::slice_z(k, cfg);
        let dy = Self::pixel_mm(i, cfg) - self.cy;
        let dx = Self::pixel_mm(j, cfg) - self.cx;
        if Self::inside(dy, dx, z, self.a, self.b, self.c) {
            CAVITY
        } else if Self::inside(dy, dx, z, self.a + self.t, self.b + self.t, self.c + self.t) {
            MYOCARDIUM
        } else {
            BACKGROUND
        }
    }

    /// Cavity volume in mL as sampled on the voxel grid.
    fn cavity_voxel_ml(&self, cfg: &CmrRenderConfig) -> f64 {
        let hw = cfg.image_hw;
        let pix = |v: f64| (v / cfg.pixel_mm).floor().clamp(0.0, hw as f64) as usize;
        let (i0, i1) = (
            pix(self.cy - self.a - cfg.pixel_mm),
            pix(self.cy + self.a + cfg.pixel_mm),
        );
        let (j0, j1) = (
            pix(self.cx - self.b - cfg.pixel_mm),
            pix(self.cx + self.b + cfg.pixel_mm),
        );
        let mut count = 0usize;
        for k in 0..N_SLICES {
            let z = Self::slice_z(k, cfg);
            for i in i0..i1.min(hw) {
                let dy = Self::pixel_mm(i, cfg) - self.cy;
                for j in j0..j1.min(hw) {
                    let dx = Self::pixel_mm(j, cfg) - self.cx;
                    if Self::inside(dy, dx, z, self.a, self.b, self.c) {
                        count += 1;
                    }
                }
            }
        }
        count as f64 * cfg.pixel_mm * cfg.pixel_mm * cfg.slice_mm / 1000.0
    }

    fn fits(&self, cfg: &CmrRenderConfig) -> bool {
        let fov = cfg.image_hw as f64 * cfg.pixel_mm;
        let r_y = self.a + self.t;
        let r_x = self.b + self.t;
        self.cy - r_y >= 0.0 && self.cy + r_y <= fov && self.cx - r_x >= 0.0 && self.cx + r_x <= fov
    }

    fn bbox(&self) -> BBox {
        BBox {
            y0: self.cy - self.a - self.t,
            y1: self.cy + self.a + self.t,
            x0: self.cx - self.b - self.t,
            x1: self.cx + self.b + self.t,
        }
    }
}

fn rasterize<T: Scalar>(
    g: &Geometry,
    cfg: &CmrRenderConfig,
    phase: Phase,
    noise: Option<(&mut ChaCha8Rng, f64)>,
) -> CmrVolume<T> {
    let hw = cfg.image_hw;
    let mut data: Vec<f64> = (0..N_SLICES * hw * hw)
        .map(|idx| g.label(idx / (hw * hw), (idx / hw) % hw, idx % hw, cfg))
        .collect();
    if let Some((rng, sd)) = noise {
        if sd > 0.0 {
            let dist = Normal::new(0.0, sd).expect("positive sd");
            data.iter_mut().for_each(|v| *v += dist.sample(rng));
        }
    }
    CmrVolume {
        intensities: Tensor::new(vec![N_SLICES, hw, hw], data.into_iter().map(T::of).collect()).expect("grid shape"),
        phase,
        pixel_mm: cfg.pixel_mm,
        slice_mm: cfg.slice_mm,
        bbox: g.bbox(),
    }
}

/// Renders a noiseless cavity with explicit semi-axes and wall thickness,
/// centred in the field of view.
pub fn render_ellipsoid<T: Scalar>(
    a: f64,
    b: f64,
    c: f64,
    wall_mm: f64,
    cfg: &CmrRenderConfig,
) -> Result<CmrVolume<T>> {
    let centre = cfg.image_hw as f64 * cfg.pixel_mm / 2.0;
    let g = Geometry {
        a,
        b,
        c,
        t: wall_mm,
        cy: centre,
        cx: centre,
    };
    if !g.fits(cfg) {
        return Err(Error::Generation(format!(
            "ellipsoid ({a}, {b}, {c}) + {wall_mm} mm exceeds the field of view"
        )));
    }
    Ok(rasterize(&g, cfg, Phase::Ed, None))
}

/// Count of voxels at the cavity intensity, times the voxel volume, in mL.
pub fn cavity_volume_ml<T: Scalar>(vol: &CmrVolume<T>) -> f64 {
    let n = vol
        .intensities
        .data()
        .iter()
        .filter(|v| (v.as_f64() - CAVITY).abs() < 1e-12)
        .count();
    n as f64 * vol.voxel_mm3() / 1000.0
}

/// Wall thickness at end-systole that keeps the shell (myocardial) volume of
/// the end-diastolic geometry.
fn systolic_wall(s_ed: f64, t_ed: f64, s_es: f64) -> f64 {
    let target = shell_volume_ml(s_ed, t_ed);
    let (mut lo, mut hi) = (0.0, 4.0 * t_ed + s_ed);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if shell_volume_ml(s_es, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Renders one phase. The in-plane offset is drawn from `seed` alone, so both
/// phases of a subject share the same position; the noise stream differs
/// per phase.
pub fn render_cmr<T: Scalar>(
    ph: &PhenotypeVector,
    phase: Phase,
    seed: u64,
    cfg: &CmrRenderConfig,
) -> Result<CmrVolume<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (oy, ox) = if cfg.max_offset_mm > 0.0 {
        (
            rng.random_range(-cfg.max_offset_mm..=cfg.max_offset_mm),
            rng.random_range(-cfg.max_offset_mm..=cfg.max_offset_mm),
        )
    } else {
        (0.0, 0.0)
    };
    let centre = cfg.image_hw as f64 * cfg.pixel_mm / 2.0;
    let target = match phase {
        Phase::Ed => ph.lv_edv,
        Phase::Es => ph.lv_esv,
    };
    let s_ed = cavity_semi_axis(ph.lv_edv);
    let wall = match phase {
        Phase::Ed => ph.wall_thickness,
        Phase::Es => systolic_wall(s_ed, ph.wall_thickness, cavity_semi_axis(ph.lv_esv)),
    };
    let geom = |s: f64| Geometry {
        a: s,
        b: s,
        c: LONG_AXIS_RATIO * s,
        t: wall,
        cy: centre + oy,
        cx: centre + ox,
    };

    // Voxel volume is monotone in the semi-axis; bisect for the target.
    let s0 = cavity_semi_axis(target);
    let (mut lo, mut hi) = (0.5 * s0, 1.5 * s0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if geom(mid).cavity_voxel_ml(cfg) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (v_lo, v_hi) = (geom(lo).cavity_voxel_ml(cfg), geom(hi).cavity_voxel_ml(cfg));
    let s = if (v_lo - target).abs() <= (v_hi - target).abs() {
        lo
    } else {
        hi
    };
    let g = geom(s);
    let achieved = g.cavity_voxel_ml(cfg);
    if !g.fits(cfg) || (achieved - target).abs() > 0.05 * target {
        return Err(Error::Generation(format!(
            "{phase} cavity of {target:.1} mL not realizable in a {}x{} field of view (got {achieved:.1} mL)",
            cfg.image_hw, cfg.image_hw
        )));
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ phase_salt(phase));
    Ok(rasterize(&g, cfg, phase, Some((&mut noise_rng, cfg.noise_sd))))
}

fn phase_salt(phase: Phase) -> u64 {
    match phase {
        Phase::Ed => 0x5eed_0000_0000_00ed,
        Phase::Es => 0x5eed_0000_0000_00e5,
    }
}

/// Crops to the box grown by `dilation_mm` on each side (clamped to the
/// field of view), then zero-pads symmetrically to `target_hw` square.
pub fn crop_and_pad<T: Scalar>(vol: &CmrVolume<T>, dilation_mm: f64, target_hw: usize) -> Result<CmrVolume<T>> {
    if vol.bbox.is_empty() {
        return Err(Error::invalid("crop_and_pad: empty bounding box"));
    }
    let (h, w) = (vol.height(), vol.width());
    let px = vol.pixel_mm;
    let lo = |v: f64, n: usize| ((v - dilation_mm) / px).floor().clamp(0.0, n as f64) as usize;
    let hi = |v: f64, n: usize| ((v + dilation_mm) / px).ceil().clamp(0.0, n as f64) as usize;
    let (i0, i1) = (lo(vol.bbox.y0, h), hi(vol.bbox.y1, h));
    let (j0, j1) = (lo(vol.bbox.x0, w), hi(vol.bbox.x1, w));
    let (ch, cw) = (i1 - i0, j1 - j0);
    if ch == 0 || cw == 0 {
        return Err(Error::invalid("crop_and_pad: bounding box lies outside the image"));
    }
    if ch > target_hw || cw > target_hw {
        return Err(Error::invalid(format!(
            "crop_and_pad: crop {ch}x{cw} exceeds target {target_hw}x{target_hw}"
        )));
    }
    let (pt, pl) = ((target_hw - ch) / 2, (target_hw - cw) / 2);
    let src = vol.intensities.data();
    let mut out = vec![T::zero(); N_SLICES * target_hw * target_hw];
    for k in 0..N_SLICES {
        for i in 0..ch {
            let s = k * h * w + (i0 + i) * w + j0;
            let d = k * target_hw * target_hw + (pt + i) * target_hw + pl;
            out[d..d + cw].copy_from_slice(&src[s..s + cw]);
        }
    }
    let dy = (pt as f64 - i0 as f64) * px;
    let dx = (pl as f64 - j0 as f64) * px;
    Ok(CmrVolume {
        intensities: Tensor::new(vec![N_SLICES, target_hw, target_hw], out)?,
        phase: vol.phase,
        pixel_mm: vol.pixel_mm,
        slice_mm: vol.slice_mm,
        bbox: vol.bbox.shifted(dy, dx),
    })
}
