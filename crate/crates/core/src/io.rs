//! Scene files, camera files and 8-bit image export.
//!
//! Binary scene layout (little endian): magic `HSPL`, then `u32` version,
//! `M_b`, `M_r` and SH degree, then one `f64` array per field for the base
//! list followed by the reflective list. Base fields in order: position (3),
//! tangent_u (3), tangent_v (3), scale_u, scale_v, opacity, SH coefficients
//! (3 per coefficient), blend weight. Reflective fields: position,
//! tangent_u, tangent_v, scale_u, scale_v, opacity, reflection (3).

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::raster::ChannelImage;
use crate::scene::{Appearance, CameraView, GaussianPrimitive, Scene};
use crate::sh::{coeff_count, ShCoeffs};

pub const MAGIC: [u8; 4] = *b"HSPL";
pub const VERSION: u32 = 1;

fn base_fields(sh_degree: usize) -> Vec<(&'static str, usize)> {
    vec![
        ("position", 3),
        ("tangent_u", 3),
        ("tangent_v", 3),
        ("scale_u", 1),
        ("scale_v", 1),
        ("opacity", 1),
        ("sh", 3 * coeff_count(sh_degree)),
        ("blend_weight", 1),
    ]
}

fn reflective_fields() -> Vec<(&'static str, usize)> {
    vec![
        ("position", 3),
        ("tangent_u", 3),
        ("tangent_v", 3),
        ("scale_u", 1),
        ("scale_v", 1),
        ("opacity", 1),
        ("reflection", 3),
    ]
}

fn field_values(g: &GaussianPrimitive, name: &str) -> Vec<f64> {
    match name {
        "position" => g.position.iter().copied().collect(),
        "tangent_u" => g.tangent_u.iter().copied().collect(),
        "tangent_v" => g.tangent_v.iter().copied().collect(),
        "scale_u" => vec![g.scale_u],
        "scale_v" => vec![g.scale_v],
        "opacity" => vec![g.opacity],
        "sh" => g
            .sh()
            .map(|s| s.coeffs.iter().flatten().copied().collect())
            .unwrap_or_default(),
        "blend_weight" => g.blend_weight().into_iter().collect(),
        "reflection" => g.reflection().map(|r| r.to_vec()).unwrap_or_default(),
        _ => unreachable!("unknown field {name}"),
    }
}

/// Encodes a scene in the binary format.
pub fn encode_scene(scene: &Scene) -> Result<Vec<u8>> {
    scene.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        scene.base.len() as u32,
        scene.reflective.len() as u32,
        scene.sh_degree as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (list, fields) in [
        (&scene.base, base_fields(scene.sh_degree)),
        (&scene.reflective, reflective_fields()),
    ] {
        for (name, _) in fields {
            for g in list.iter() {
                for v in field_values(g, name) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("array too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn vec3(v: &[f64]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

/// Decodes and validates a binary scene.
pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let m_b = r.u32()? as usize;
    let m_r = r.u32()? as usize;
    let sh_degree = r.u32()? as usize;
    if sh_degree > crate::sh::MAX_SH_DEGREE {
        return Err(Error::Format(format!("SH degree {sh_degree} out of range")));
    }
    let mut read_list = |count: usize, fields: &[(&'static str, usize)]| -> Result<Vec<Vec<f64>>> {
        // per Gaussian, fields concatenated in declared order
        let mut per = vec![Vec::new(); count];
        for &(_, width) in fields {
            let all = r.f64s(count * width)?;
            for (i, chunk) in all.chunks(width.max(1)).enumerate().take(count) {
                per[i].extend_from_slice(chunk);
            }
        }
        Ok(per)
    };
    let base_raw = read_list(m_b, &base_fields(sh_degree))?;
    let refl_raw = read_list(m_r, &reflective_fields())?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let n_sh = coeff_count(sh_degree);
    let common = |v: &[f64], appearance: Appearance| GaussianPrimitive {
        position: vec3(&v[0..3]),
        tangent_u: vec3(&v[3..6]),
        tangent_v: vec3(&v[6..9]),
        scale_u: v[9],
        scale_v: v[10],
        opacity: v[11],
        appearance,
    };
    let base = base_raw
        .iter()
        .map(|v| {
            let sh = ShCoeffs {
                coeffs: v[12..12 + 3 * n_sh]
                    .chunks(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect(),
            };
            common(
                v,
                Appearance::Base {
                    sh,
                    blend_weight: v[12 + 3 * n_sh],
                },
            )
        })
        .collect();
    let reflective = refl_raw
        .iter()
        .map(|v| {
            common(
                v,
                Appearance::Reflective {
                    reflection: [v[12], v[13], v[14]],
                },
            )
        })
        .collect();
    let scene = Scene {
        sh_degree,
        base,
        reflective,
    };
    scene.validate()?;
    Ok(scene)
}

/// Human-readable variant carrying the same header fields as the binary format.
#[derive(Debug, Serialize, Deserialize)]
struct SceneJson {
    magic: String,
    version: u32,
    m_base: usize,
    m_reflective: usize,
    sh_degree: usize,
    base: Vec<GaussianPrimitive>,
    reflective: Vec<GaussianPrimitive>,
}

pub fn encode_scene_json(scene: &Scene) -> Result<String> {
    scene.validate()?;
    let doc = SceneJson {
        magic: "HSPL".into(),
        version: VERSION,
        m_base: scene.base.len(),
        m_reflective: scene.reflective.len(),
        sh_degree: scene.sh_degree,
        base: scene.base.clone(),
        reflective: scene.reflective.clone(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn decode_scene_json(text: &str) -> Result<Scene> {
    let doc: SceneJson = serde_json::from_str(text)?;
    if doc.magic != "HSPL" {
        return Err(Error::Format("bad magic".into()));
    }
    if doc.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}",
            doc.version
        )));
    }
    if doc.m_base != doc.base.len() || doc.m_reflective != doc.reflective.len() {
        return Err(Error::Format(
            "header counts disagree with the Gaussian lists".into(),
        ));
    }
    let scene = Scene {
        sh_degree: doc.sh_degree,
        base: doc.base,
        reflective: doc.reflective,
    };
    scene.validate()?;
    Ok(scene)
}

fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Writes JSON for `.json` paths and the binary format otherwise.
pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_json(path) {
        fs::write(path, encode_scene_json(scene)?)?;
    } else {
        fs::write(path, encode_scene(scene)?)?;
    }
    Ok(())
}

/// Reads either variant, detected by the leading magic bytes.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&MAGIC) {
        decode_scene(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Format("neither binary nor JSON scene".into()))?;
        decode_scene_json(text)
    }
}

/// A camera given either in full or by eye, target and up.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraSpec {
    Full(CameraView),
    LookAt {
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    },
}

impl CameraSpec {
    pub fn resolve(&self) -> Result<CameraView> {
        match self {
            CameraSpec::Full(v) => {
                v.validate()?;
                Ok(v.clone())
            }
            CameraSpec::LookAt {
                eye,
                target,
                up,
                focal,
                width,
                height,
            } => CameraView::look_at(
                Vec3::from(*eye),
                Vec3::from(*target),
                Vec3::from(*up),
                *focal,
                *width,
                *height,
            ),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ViewsDoc {
    Many(Vec<CameraSpec>),
    One(CameraSpec),
}

/// Reads a single camera or a list of cameras.
pub fn load_views(path: impl AsRef<Path>) -> Result<Vec<CameraView>> {
    let doc: ViewsDoc = serde_json::from_str(&fs::read_to_string(path)?)?;
    let specs = match doc {
        ViewsDoc::Many(v) => v,
        ViewsDoc::One(v) => vec![v],
    };
    specs.iter().map(CameraSpec::resolve).collect()
}

pub fn load_camera(path: impl AsRef<Path>) -> Result<CameraView> {
    let mut views = load_views(path)?;
    if views.len() != 1 {
        return Err(Error::InvalidCamera(format!(
            "expected one camera, found {}",
            views.len()
        )));
    }
    Ok(views.remove(0))
}

pub fn save_views(views: &[CameraView], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(views)?)?;
    Ok(())
}

pub fn srgb_encode(linear: f64) -> f64 {
    let x = linear.clamp(0.0, 1.0);
    if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(encoded: f64) -> f64 {
    let x = encoded.clamp(0.0, 1.0);
    if x <= 0.040_45 {
        x / 12.92
    } else {
        ((x + 0.055) / 1.055).powf(2.4)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm" | "pgm" | "pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::InvalidArgument(format!(
            "unsupported image extension: {}",
            path.display()
        ))),
    }
}

/// Writes a 1- or 3-channel image at 8 bits. With `srgb` the values are
/// treated as linear and encoded; otherwise they are clamped and quantized.
pub fn write_image(img: &ChannelImage, path: impl AsRef<Path>, srgb: bool) -> Result<()> {
    let path = path.as_ref();
    let fmt = format_for(path)?;
    let enc = |v: f64| quantize(if srgb { srgb_encode(v) } else { v });
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        3 => {
            let buf: Vec<u8> = img.data.iter().map(|&v| enc(v)).collect();
            RgbImage::from_raw(w, h, buf)
                .expect("buffer size")
                .save_with_format(path, fmt)?;
        }
        1 => {
            let buf: Vec<u8> = img.data.iter().map(|&v| enc(v)).collect();
            GrayImage::from_raw(w, h, buf)
                .expect("buffer size")
                .save_with_format(path, fmt)?;
        }
        c => return Err(Error::Shape(format!("cannot export a {c}-channel image"))),
    }
    Ok(())
}

/// Reads an 8-bit image as RGB values in `[0, 1]`, decoding sRGB if asked.
pub fn read_image(path: impl AsRef<Path>, srgb: bool) -> Result<ChannelImage> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut img = ChannelImage::new(w as usize, h as usize, 3);
    for (d, &b) in img.data.iter_mut().zip(rgb.as_raw()) {
        let v = b as f64 / 255.0;
        *d = if srgb { srgb_decode(v) } else { v };
    }
    Ok(img)
}

/// Maps unit normals from `[-1, 1]` to `[0, 1]` per channel for display.
pub fn normals_for_display(normals: &ChannelImage) -> ChannelImage {
    let mut out = normals.clone();
    out.data.iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
    out
}
