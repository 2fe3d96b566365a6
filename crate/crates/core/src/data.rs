//! Dataset generators and the KIMG raster format.
//!
//! KIMG layout: magic `KIMG`, then little-endian u32 version, count, height
//! and width, then `count * height * width` little-endian f32 values in
//! row-major order.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::covering::CoveringMap;
use crate::error::{domain, Error, Result};
use crate::exec::Exec;

pub const KIMG_MAGIC: &[u8; 4] = b"KIMG";
pub const KIMG_VERSION: u32 = 1;
pub const KIMG_HEADER_LEN: usize = 20;

/// Independent generator for item `index` of a dataset drawn with `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A stack of equally sized f32 rasters, as stored in a KIMG file.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(count: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if count == 0 || height == 0 || width == 0 {
            return Err(domain("raster dimensions must be positive"));
        }
        if data.len() != count * height * width {
            return Err(Error::Shape(format!(
                "{} values for {count} rasters of {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            count,
            height,
            width,
            data,
        })
    }

    pub fn item_len(&self) -> usize {
        self.height * self.width
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn encoded_len(&self) -> usize {
        KIMG_HEADER_LEN + 4 * self.data.len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(KIMG_MAGIC);
        for v in [
            KIMG_VERSION,
            self.count as u32,
            self.height as u32,
            self.width as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, msg: String| Error::Parse {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < KIMG_HEADER_LEN {
            return Err(parse(
                bytes.len(),
                format!("truncated header ({} of {KIMG_HEADER_LEN} bytes)", bytes.len()),
            ));
        }
        if &bytes[..4] != KIMG_MAGIC {
            return Err(parse(0, "bad magic, expected KIMG".into()));
        }
        let field = |i: usize| {
            let at = 4 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
        };
        let version = field(0);
        if version != KIMG_VERSION {
            return Err(parse(4, format!("unsupported version {version}")));
        }
        let (count, height, width) = (field(1) as usize, field(2) as usize, field(3) as usize);
        if count == 0 || height == 0 || width == 0 {
            return Err(parse(8, "zero-sized raster".into()));
        }
        let values = count
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| parse(8, "raster size overflows".into()))?;
        let expected = values
            .checked_mul(4)
            .and_then(|v| v.checked_add(KIMG_HEADER_LEN))
            .ok_or_else(|| parse(8, "raster size overflows".into()))?;
        if bytes.len() < expected {
            return Err(parse(
                bytes.len(),
                format!("truncated data: expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        if bytes.len() > expected {
            return Err(parse(expected, "trailing bytes after raster data".into()));
        }
        let data = bytes[KIMG_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(count, height, width, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Images with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    raster: Raster,
}

impl ImageSet {
    pub fn new(raster: Raster) -> Result<Self> {
        if let Some(i) = raster.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(domain(format!(
                "pixel {i} has intensity {} outside [0, 1]",
                raster.data[i]
            )));
        }
        Ok(Self { raster })
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn into_raster(self) -> Raster {
        self.raster
    }

    pub fn count(&self) -> usize {
        self.raster.count
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.raster.data
    }

    pub fn pixels_per_image(&self) -> usize {
        self.raster.item_len()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.raster.item(i)
    }

    /// The images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<ImageSet> {
        let mut data = Vec::with_capacity(indices.len() * self.raster.item_len());
        for &i in indices {
            if i >= self.count() {
                return Err(domain(format!("image {i} of {}", self.count())));
            }
            data.extend_from_slice(self.image(i));
        }
        ImageSet::new(Raster::new(indices.len(), self.height(), self.width(), data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.raster.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(Raster::load(path)?)
    }
}

fn check_circle_args(size: usize, radius: f64) -> Result<()> {
    if size < 2 {
        return Err(domain(format!("image size {size} is below 2")));
    }
    if !(radius > 0.0 && radius < 0.5) {
        return Err(domain(format!("radius {radius} is outside (0, 0.5)")));
    }
    Ok(())
}

/// A `size x size` binary image of the disk of `radius` around `center` on
/// the Klein bottle. Pixel `(i, j)` samples the point `((j + .5)/S, (i + .5)/S)`.
pub fn render_klein_disk(size: usize, radius: f64, center: [f64; 2]) -> Result<Vec<f32>> {
    check_circle_args(size, radius)?;
    let k = CoveringMap::KleinComposed;
    let c = k.project(&center)?;
    let mut img = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let p = [(j as f64 + 0.5) / size as f64, (i as f64 + 0.5) / size as f64];
            let lit = k.quotient_distance(&p, &c)? <= radius;
            img.push(if lit { 1.0 } else { 0.0 });
        }
    }
    Ok(img)
}

/// `n` disk images with centers drawn uniformly from the unit square.
/// Returns the images and their centers.
pub fn gen_klein_circles(n: usize, size: usize, radius: f64, seed: u64) -> Result<(ImageSet, Vec<[f64; 2]>)> {
    gen_klein_circles_with(n, size, radius, seed, Exec::default())
}

pub fn gen_klein_circles_with(
    n: usize,
    size: usize,
    radius: f64,
    seed: u64,
    exec: Exec,
) -> Result<(ImageSet, Vec<[f64; 2]>)> {
    check_circle_args(size, radius)?;
    if n == 0 {
        return Err(domain("dataset must contain at least one image"));
    }
    let items = exec.map_range(n, |i| {
        let mut rng = item_rng(seed, i as u64);
        let center = [rng.random::<f64>(), rng.random::<f64>()];
        render_klein_disk(size, radius, center).map(|img| (img, center))
    });
    let mut data = Vec::with_capacity(n * size * size);
    let mut centers = Vec::with_capacity(n);
    for item in items {
        let (img, c) = item?;
        data.extend_from_slice(&img);
        centers.push(c);
    }
    Ok((ImageSet::new(Raster::new(n, size, size, data)?)?, centers))
}

/// The filter `sin(θ₂) t + cos(θ₂) (2t² - 1)` with `t = cos(θ₁) x + sin(θ₁) y`,
/// sampled at `x, y ∈ {-1, 0, 1}`; entry `3 i + j` has `x = j - 1`, `y = i - 1`.
pub fn gabor_klein(theta1: f64, theta2: f64) -> [f64; 9] {
    let (s1, c1) = theta1.sin_cos();
    let (s2, c2) = theta2.sin_cos();
    let mut f = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let (x, y) = (j as f64 - 1.0, i as f64 - 1.0);
            let t = c1 * x + s1 * y;
            f[3 * i + j] = s2 * t + c2 * (2.0 * t * t - 1.0);
        }
    }
    f
}

/// Points in ℝ⁹ drawn from the Gabor-Klein family.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCloud {
    pub points: Vec<[f64; 9]>,
    pub thetas: Vec<[f64; 2]>,
}

impl FilterCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Stored as a stack of 3x3 rasters; the angles are not kept.
    pub fn to_raster(&self) -> Result<Raster> {
        let data = self.points.iter().flatten().map(|&v| v as f32).collect();
        Raster::new(self.len(), 3, 3, data)
    }

    pub fn points_as_rows(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.to_vec()).collect()
    }
}

/// `n` filters at angles uniform on `[0, 2π)²`.
pub fn sample_filter_cloud(n: usize, seed: u64) -> Result<FilterCloud> {
    if n == 0 {
        return Err(domain("filter cloud must contain at least one point"));
    }
    let thetas: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)]
        })
        .collect();
    let points = thetas.iter().map(|t| gabor_klein(t[0], t[1])).collect();
    Ok(FilterCloud { points, thetas })
}

/// Rows of a raster as points in ℝ^(height·width).
pub fn raster_rows(r: &Raster) -> Vec<Vec<f64>> {
    (0..r.count)
        .map(|i| r.item(i).iter().map(|&v| v as f64).collect())
        .collect()
}
