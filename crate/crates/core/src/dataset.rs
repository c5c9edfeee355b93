//! On-disk dataset format.
//!
//! A dataset is a directory holding:
//!
//! * `index.json`: `{"format_version": 1, "records": [...]}`, one record per
//!   scene with `id`, `image`, `masks`, `height`, `width`, `instances` and
//!   `noise_level`;
//! * `<stem>.png`: 16-bit grayscale image, value `round(v · 65535)`;
//! * `<stem>.masks`: little-endian mask archive:
//!
//! ```text
//! magic   "BRMK"
//! u32     format version (1)
//! u32     height, u32 width, u32 instance count
//! per instance:
//!   u32 x0, y0, x1, y1        tight box, exclusive max corner
//!   amodal, overlap, nonoverlap planes, each ceil(h·w/8) bytes,
//!   row-major bits, least significant bit first
//! u32     FNV-1a checksum of every preceding byte
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_algebra::{BinaryMask, PixelBox};
use crate::synth::{AnnotatedScene, GrayImage, Instance};

pub const FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
const MASK_MAGIC: &[u8; 4] = b"BRMK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub records: Vec<SceneRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: usize,
    pub image: String,
    pub masks: String,
    pub height: usize,
    pub width: usize,
    pub instances: usize,
    pub noise_level: f64,
}

fn fnv1a(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0x811C_9DC5u32, |h, &b| (h ^ b as u32).wrapping_mul(0x0100_0193))
}

fn pack_bits(mask: &BinaryMask, out: &mut Vec<u8>) {
    let bits = mask.bits();
    for chunk in bits.chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            byte |= b << i;
        }
        out.push(byte);
    }
}

/// Serialises one scene's masks into the archive layout.
pub fn encode_masks(scene: &AnnotatedScene) -> Vec<u8> {
    let (h, w) = scene.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    for v in [FORMAT_VERSION, h as u32, w as u32, scene.instances.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for inst in &scene.instances {
        let b = inst.bbox;
        for v in [b.x0, b.y0, b.x1, b.y1] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        pack_bits(&inst.amodal, &mut out);
        pack_bits(&inst.overlap, &mut out);
        pack_bits(&inst.nonoverlap, &mut out);
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.record,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn plane(&mut self, h: usize, w: usize) -> Result<BinaryMask> {
        let n = h * w;
        let packed = self.take(n.div_ceil(8))?;
        let bits = (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
        BinaryMask::from_bits(h, w, bits).map_err(|e| Error::parse(self.record, e.to_string()))
    }
}

/// Parses a mask archive. `record` names the file in error messages.
pub fn decode_masks(bytes: &[u8], record: &str) -> Result<(usize, usize, Vec<Instance>)> {
    if bytes.len() < 4 {
        return Err(Error::parse(record, "file shorter than its checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let mut r = Reader {
        bytes: body,
        pos: 0,
        record,
    };
    if r.take(4)? != MASK_MAGIC {
        return Err(Error::parse(record, "bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::parse(record, format!("unsupported version {version}")));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let count = r.u32()? as usize;
    if h == 0 || w == 0 || h > 1 << 14 || w > 1 << 14 {
        return Err(Error::parse(record, format!("implausible size {h}x{w}")));
    }
    let per_instance = 16 + 3 * (h * w).div_ceil(8);
    if count.saturating_mul(per_instance) != body.len().saturating_sub(r.pos) {
        return Err(Error::parse(
            record,
            format!(
                "payload holds {} bytes, {count} instances need {}",
                body.len().saturating_sub(r.pos),
                count.saturating_mul(per_instance)
            ),
        ));
    }
    if fnv1a(body) != stored {
        return Err(Error::parse(record, "checksum mismatch"));
    }
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let bbox = PixelBox {
            x0: r.u32()? as usize,
            y0: r.u32()? as usize,
            x1: r.u32()? as usize,
            y1: r.u32()? as usize,
        };
        instances.push(Instance {
            bbox,
            amodal: r.plane(h, w)?,
            overlap: r.plane(h, w)?,
            nonoverlap: r.plane(h, w)?,
        });
    }
    Ok((h, w, instances))
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Encodes an image as 16-bit grayscale PNG.
pub fn encode_png(image: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::invalid(format!("png header: {e}")))?;
        let data: Vec<u8> = image.pixels.iter().flat_map(|&v| quantize(v).to_be_bytes()).collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::invalid(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8], record: &str) -> Result<GrayImage> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::parse(record, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(record, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::parse(record, "expected 16-bit grayscale"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = buf[..info.buffer_size()]
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect::<Vec<_>>();
    if pixels.len() != w * h {
        return Err(Error::parse(record, "pixel count mismatch"));
    }
    Ok(GrayImage {
        height: h,
        width: w,
        pixels,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `scenes` into directory `dir` (created if missing).
pub fn save_dataset(scenes: &[AnnotatedScene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (id, scene) in scenes.iter().enumerate() {
        let stem = format!("scene_{id:05}");
        let image = format!("{stem}.png");
        let masks = format!("{stem}.masks");
        write(&dir.join(&image), &encode_png(&scene.image)?)?;
        write(&dir.join(&masks), &encode_masks(scene))?;
        let (h, w) = scene.dims();
        records.push(SceneRecord {
            id,
            image,
            masks,
            height: h,
            width: w,
            instances: scene.instances.len(),
            noise_level: scene.noise_level,
        });
    }
    let index = DatasetIndex {
        format_version: FORMAT_VERSION,
        records,
    };
    let path = dir.join(INDEX_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &index)
        .map_err(|e| Error::parse(INDEX_FILE, e.to_string()))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`save_dataset`], validating every record.
pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedScene>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| Error::parse(INDEX_FILE, e.to_string()))?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::parse(
            INDEX_FILE,
            format!("unsupported format_version {}", index.format_version),
        ));
    }
    let mut scenes = Vec::with_capacity(index.records.len());
    for rec in &index.records {
        for name in [&rec.image, &rec.masks] {
            if name.contains('/') || name.contains('\\') || name.starts_with('.') {
                return Err(Error::parse(format!("record {}", rec.id), format!("unsafe file name {name:?}")));
            }
        }
        let image = decode_png(&read(&dir.join(&rec.image))?, &rec.image)?;
        let (h, w, instances) = decode_masks(&read(&dir.join(&rec.masks))?, &rec.masks)?;
        if (h, w) != (image.height, image.width) || (h, w) != (rec.height, rec.width) {
            return Err(Error::parse(&rec.masks, "mask size disagrees with image or index"));
        }
        if instances.len() != rec.instances {
            return Err(Error::parse(&rec.masks, "instance count disagrees with index"));
        }
        let scene = AnnotatedScene {
            image,
            instances,
            noise_level: rec.noise_level,
        };
        scene
            .validate()
            .map_err(|e| Error::parse(&rec.masks, e.to_string()))?;
        scenes.push(scene);
    }
    Ok(scenes)
}
