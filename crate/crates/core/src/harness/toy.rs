//! Synthetic shapes dataset: one coloured shape per 32x32 image, captioned
//! from a small template grammar.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{save_features, toy_encode, Raster, ToyEncoderParams};
use crate::error::{Error, Result};

pub const TOY_SIDE: usize = 32;

const COLOURS: [(&str, [f32; 3]); 5] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.2, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
];
const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
const PLACES: [(&str, usize, usize); 5] = [
    ("left", 8, 16),
    ("right", 24, 16),
    ("top", 16, 8),
    ("bottom", 16, 24),
    ("middle", 16, 16),
];
const SIZES: [(&str, f32); 2] = [("small", 4.5), ("large", 7.5)];

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub id: String,
    pub image: Raster,
    pub captions: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySpec {
    pub count: usize,
    pub captions_per_image: usize,
    pub seed: u64,
}

fn inside(shape: &str, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // Upward-pointing: the half-width grows linearly from apex to base.
        "triangle" => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        "cross" => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
        _ => false,
    }
}

fn captions(size: &str, colour: &str, shape: &str, place: &str, n: usize) -> Vec<String> {
    let templates = [
        format!("a {size} {colour} {shape} on the {place}"),
        format!("there is a {colour} {shape} at the {place}"),
        format!("the {place} holds a {size} {colour} {shape}"),
        format!("one {size} {shape} coloured {colour} in the {place}"),
        format!("a {colour} {shape} of {size} size near the {place}"),
    ];
    templates.into_iter().cycle().take(n).collect()
}

/// `count` images with distinct (size, colour, shape, place) combinations.
pub fn generate_toy(spec: ToySpec) -> Result<Vec<ToySample>> {
    let total = COLOURS.len() * SHAPES.len() * PLACES.len() * SIZES.len();
    if spec.count > total {
        return Err(Error::Config(format!("toy set has only {total} distinct images")));
    }
    if spec.captions_per_image == 0 {
        return Err(Error::Config("captions_per_image must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut combos: Vec<usize> = (0..total).collect();
    combos.shuffle(&mut rng);
    let mut out = Vec::with_capacity(spec.count);
    for (i, &c) in combos.iter().take(spec.count).enumerate() {
        let (colour, rest) = (c % COLOURS.len(), c / COLOURS.len());
        let (shape, rest) = (rest % SHAPES.len(), rest / SHAPES.len());
        let (place, size) = (rest % PLACES.len(), rest / PLACES.len());
        let (cname, rgb) = COLOURS[colour];
        let (pname, cx, cy) = PLACES[place];
        let (sname, radius) = SIZES[size];
        let mut data = Vec::with_capacity(TOY_SIDE * TOY_SIDE * 3);
        for y in 0..TOY_SIDE {
            for x in 0..TOY_SIDE {
                let (dx, dy) = (x as f32 + 0.5 - cx as f32, y as f32 + 0.5 - cy as f32);
                let hit = inside(SHAPES[shape], dx, dy, radius);
                for ch in 0..3 {
                    let noise: f32 = rng.gen_range(0.0..0.05);
                    data.push(if hit { rgb[ch] } else { 0.05 } + noise);
                }
            }
        }
        out.push(ToySample {
            id: format!("toy{i:03}"),
            image: Raster::new(TOY_SIDE, TOY_SIDE, 3, data)?,
            captions: captions(sname, cname, SHAPES[shape], pname, spec.captions_per_image),
        });
    }
    Ok(out)
}

/// Writes PNGs (or, with an encoder, feature files) and a `manifest.jsonl`
/// into `dir`; returns the manifest path.
pub fn write_toy(dir: &Path, samples: &[ToySample], encoder: Option<&ToyEncoderParams>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut lines = Vec::new();
    for s in samples {
        let (key, file) = match encoder {
            Some(enc) => {
                let file = format!("{}.annv", s.id);
                save_features(&dir.join(&file), &toy_encode(&s.image, enc)?.into_annotations(s.id.clone())?)?;
                ("features", file)
            }
            None => {
                let file = format!("{}.png", s.id);
                save_png(&dir.join(&file), &s.image)?;
                ("image", file)
            }
        };
        let line = serde_json::json!({ "id": s.id, key: file, "captions": s.captions });
        lines.push(line.to_string());
    }
    let mut f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}

fn save_png(path: &Path, r: &Raster) -> Result<()> {
    let bytes: Vec<u8> = r
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(r.width as u32, r.height as u32, bytes)
        .ok_or_else(|| Error::format(path, "raster size mismatch"))?
        .save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}
