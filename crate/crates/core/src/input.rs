//! Turns images and videos into pixel stacks for the encoder.
//!
//! Images become static videos by repetition, native videos are uniformly
//! subsampled, and large images can be split into fixed-size tiles chosen by
//! aspect ratio. Tiles of one input share the frame timestamps.

use std::fs;
use std::path::Path;

use crate::conditioning::{relative_timestamps, TimestepVector};
use crate::error::{PvcError, Result};
use crate::tensor::Tensor;
use crate::vit::PvcConfig;

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(PvcError::InvalidArgument(format!(
                "image size {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(PvcError::InvalidArgument(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(RawImage {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(x, y, c));
                }
            }
        }
        RawImage::new(width, height, pixels)
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RawImage {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        RawImage {
            width: w,
            height: h,
            pixels,
        }
    }
}

/// Ordered frames of equal size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawVideo {
    pub frames: Vec<RawImage>,
    pub is_static: bool,
}

impl RawVideo {
    pub fn new(frames: Vec<RawImage>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| PvcError::InvalidArgument("video has no frames".into()))?;
        if frames
            .iter()
            .any(|f| f.width != first.width || f.height != first.height)
        {
            return Err(PvcError::InvalidArgument(
                "video frames differ in size".into(),
            ));
        }
        Ok(RawVideo {
            frames,
            is_static: false,
        })
    }

    pub fn native_frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn timestamps(&self) -> TimestepVector {
        relative_timestamps(self.frames.len()).expect("video has at least one frame")
    }
}

/// Repeats an image `t_img` times.
pub fn image_to_static_video(img: &RawImage, t_img: usize) -> Result<RawVideo> {
    if t_img == 0 {
        return Err(PvcError::InvalidArgument("t_img must be at least 1".into()));
    }
    Ok(RawVideo {
        frames: vec![img.clone(); t_img],
        is_static: true,
    })
}

/// Indices `round(i·(L-1)/(T-1))`, or `[0]` for a single frame.
pub fn sample_indices(native: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > native {
        return Err(PvcError::InvalidArgument(format!(
            "cannot sample {count} frames from a {native}-frame video"
        )));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    let step = (native - 1) as f64 / (count - 1) as f64;
    Ok((0..count)
        .map(|i| (i as f64 * step).round() as usize)
        .collect())
}

pub fn sample_frames(v: &RawVideo, count: usize) -> Result<RawVideo> {
    let idx = sample_indices(v.native_frame_count(), count)?;
    Ok(RawVideo {
        frames: idx.into_iter().map(|i| v.frames[i].clone()).collect(),
        is_static: v.is_static,
    })
}

/// Grid of `rows x cols` tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
}

impl TileGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Picks the grid whose `cols/rows` is closest to `width/height`, breaking
/// ties toward fewer tiles, then toward more columns.
pub fn choose_grid(width: usize, height: usize, max_tiles: usize) -> Result<TileGrid> {
    if max_tiles == 0 {
        return Err(PvcError::InvalidArgument(
            "max_tiles must be at least 1".into(),
        ));
    }
    let aspect = width as f64 / height as f64;
    let mut best: Option<(f64, TileGrid)> = None;
    for rows in 1..=max_tiles {
        for cols in 1..=max_tiles / rows {
            let g = TileGrid { rows, cols };
            let err = (cols as f64 / rows as f64 - aspect).abs();
            let better = match best {
                None => true,
                Some((be, bg)) => {
                    err < be
                        || (err == be && g.count() < bg.count())
                        || (err == be && g.count() == bg.count() && g.cols > bg.cols)
                }
            };
            if better {
                best = Some((err, g));
            }
        }
    }
    Ok(best.expect("at least the 1x1 grid").1)
}

/// Bilinear resize with half-pixel centers; same-size resizes are exact.
pub fn resize_bilinear(img: &RawImage, width: usize, height: usize) -> Result<RawImage> {
    if width == 0 || height == 0 {
        return Err(PvcError::InvalidArgument(format!(
            "resize to {width}x{height}"
        )));
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let coord = |o: usize, s: f64, limit: usize| {
        let c = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (limit - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(limit - 1), c - i0 as f64)
    };
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, sx, img.width);
            for c in 0..3 {
                let p = |xx, yy| img.pixel(xx, yy, c) as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawImage::new(width, height, pixels)
}

#[derive(Debug, Clone)]
pub struct TiledImage {
    pub grid: TileGrid,
    /// The image after resizing to the grid, before splitting.
    pub resized: RawImage,
    /// Row-major tiles.
    pub tiles: Vec<RawImage>,
}

/// Resizes the image to `cols·tile_px x rows·tile_px` and splits it.
pub fn dynamic_tile(img: &RawImage, tile_px: usize, max_tiles: usize) -> Result<TiledImage> {
    if tile_px == 0 {
        return Err(PvcError::InvalidArgument("tile_px must be positive".into()));
    }
    let grid = choose_grid(img.width, img.height, max_tiles)?;
    let resized = resize_bilinear(img, grid.cols * tile_px, grid.rows * tile_px)?;
    let tiles = split_tiles(&resized, grid, tile_px);
    Ok(TiledImage {
        grid,
        resized,
        tiles,
    })
}

fn split_tiles(img: &RawImage, grid: TileGrid, tile_px: usize) -> Vec<RawImage> {
    let mut tiles = Vec::with_capacity(grid.count());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            tiles.push(img.crop(c * tile_px, r * tile_px, tile_px, tile_px));
        }
    }
    tiles
}

/// Inverse of the split in [`dynamic_tile`].
pub fn reassemble_tiles(tiles: &[RawImage], grid: TileGrid) -> Result<RawImage> {
    if tiles.len() != grid.count() {
        return Err(PvcError::InvalidArgument(format!(
            "{} tiles for a {}x{} grid",
            tiles.len(),
            grid.rows,
            grid.cols
        )));
    }
    let tile_px = tiles[0].width;
    let (w, h) = (grid.cols * tile_px, grid.rows * tile_px);
    let mut pixels = vec![0u8; w * h * 3];
    for (i, t) in tiles.iter().enumerate() {
        let (r, c) = (i / grid.cols, i % grid.cols);
        for y in 0..tile_px {
            let dst = ((r * tile_px + y) * w + c * tile_px) * 3;
            pixels[dst..dst + tile_px * 3]
                .copy_from_slice(&t.pixels[y * tile_px * 3..(y + 1) * tile_px * 3]);
        }
    }
    RawImage::new(w, h, pixels)
}

/// Per-channel standardization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl PixelStats {
    pub fn from_config(cfg: &PvcConfig) -> Self {
        PixelStats {
            mean: cfg.pixel_mean,
            std: cfg.pixel_std,
        }
    }
}

/// `[n, H, W, 3]` tensor of `(p/255 - mean)/std` for same-size images.
pub fn normalize(images: &[RawImage], stats: &PixelStats) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| PvcError::InvalidArgument("no images to normalize".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        if img.width != first.width || img.height != first.height {
            return Err(PvcError::InvalidArgument("images differ in size".into()));
        }
        data.extend(
            img.pixels
                .iter()
                .enumerate()
                .map(|(i, &p)| (p as f64 / 255.0 - stats.mean[i % 3]) / stats.std[i % 3]),
        );
    }
    Tensor::new(vec![images.len(), first.height, first.width, 3], data)
}

/// Maps normalized values back to the `[0, 255]` pixel scale.
pub fn denormalize(t: &Tensor, stats: &PixelStats) -> Result<Tensor> {
    if t.last_dim() != 3 {
        return Err(PvcError::shape("denormalize", format!("{:?}", t.shape())));
    }
    Tensor::from_fn(t.shape(), |i| {
        (t.data()[i] * stats.std[i % 3] + stats.mean[i % 3]) * 255.0
    })
}

/// Encoder-ready pixels `[tiles, T, S, S, 3]` plus the frame timestamps.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    pub pixels: Tensor,
    pub timestamps: TimestepVector,
    pub is_static: bool,
    pub grid: TileGrid,
}

/// Image -> optional tiling -> static video of `cfg.t_img` frames.
pub fn prepare_image(img: &RawImage, cfg: &PvcConfig, max_tiles: usize) -> Result<PreparedInput> {
    let tiled = dynamic_tile(img, cfg.image_size, max_tiles)?;
    let t = cfg.t_img;
    let mut frames = Vec::with_capacity(tiled.tiles.len() * t);
    for tile in &tiled.tiles {
        frames.extend(image_to_static_video(tile, t)?.frames);
    }
    let pixels = normalize(&frames, &PixelStats::from_config(cfg))?;
    let s = cfg.image_size;
    Ok(PreparedInput {
        pixels: pixels.reshape(&[tiled.grid.count(), t, s, s, 3])?,
        timestamps: relative_timestamps(t)?,
        is_static: true,
        grid: tiled.grid,
    })
}

/// Video -> `count` uniformly sampled frames -> resize, or tile every frame
/// on the grid chosen for the first frame when `max_tiles` is given.
pub fn prepare_video(
    v: &RawVideo,
    cfg: &PvcConfig,
    count: usize,
    max_tiles: Option<usize>,
) -> Result<PreparedInput> {
    if count < cfg.frame_min || count > cfg.frame_max {
        return Err(PvcError::InvalidArgument(format!(
            "frame count {count} outside [{}, {}]",
            cfg.frame_min, cfg.frame_max
        )));
    }
    let sampled = sample_frames(v, count)?;
    let s = cfg.image_size;
    let first = &sampled.frames[0];
    let grid = match max_tiles {
        Some(m) => choose_grid(first.width, first.height, m)?,
        None => TileGrid { rows: 1, cols: 1 },
    };
    // Tile-major so that each tile is one batch item with `count` frames.
    let mut per_tile: Vec<Vec<RawImage>> = vec![Vec::with_capacity(count); grid.count()];
    for f in &sampled.frames {
        let resized = resize_bilinear(f, grid.cols * s, grid.rows * s)?;
        for (slot, tile) in per_tile.iter_mut().zip(split_tiles(&resized, grid, s)) {
            slot.push(tile);
        }
    }
    let frames: Vec<RawImage> = per_tile.into_iter().flatten().collect();
    let pixels = normalize(&frames, &PixelStats::from_config(cfg))?;
    Ok(PreparedInput {
        pixels: pixels.reshape(&[grid.count(), count, s, s, 3])?,
        timestamps: relative_timestamps(count)?,
        is_static: false,
        grid,
    })
}

fn ppm_err(detail: impl Into<String>) -> PvcError {
    PvcError::Format {
        kind: "PPM",
        detail: detail.into(),
    }
}

/// Parses a binary PPM (P6) with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(ppm_err("only binary P6 images are supported"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?.parse().map_err(|_| ppm_err(format!("bad {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(ppm_err(format!("maxval {maxval} unsupported")));
    }
    let body = pos + 1;
    let need = w * h * 3;
    if bytes.len() < body + need {
        return Err(ppm_err("truncated pixel data"));
    }
    RawImage::new(w, h, bytes[body..body + need].to_vec()).map_err(|e| ppm_err(e.to_string()))
}

pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| PvcError::io(path, e))?)
}

pub fn write_ppm(img: &RawImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| PvcError::io(path, e))
}

/// Frame stack `[T, H, W, 3]` of 0..=255 values (as stored in PVCT files).
pub fn video_from_tensor(t: &Tensor) -> Result<RawVideo> {
    let &[n, h, w, 3] = t.shape() else {
        return Err(PvcError::shape(
            "video_from_tensor",
            format!("{:?}", t.shape()),
        ));
    };
    let per = h * w * 3;
    let frames = (0..n)
        .map(|i| {
            let px = t.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| {
                    if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                        Ok(v as u8)
                    } else {
                        Err(PvcError::Format {
                            kind: "video",
                            detail: format!("pixel value {v} is not a byte"),
                        })
                    }
                })
                .collect::<Result<Vec<u8>>>()?;
            RawImage::new(w, h, px)
        })
        .collect::<Result<Vec<_>>>()?;
    RawVideo::new(frames)
}

pub fn video_to_tensor(v: &RawVideo) -> Result<Tensor> {
    let f = &v.frames[0];
    let data = v
        .frames
        .iter()
        .flat_map(|f| f.pixels.iter().map(|&p| p as f64))
        .collect();
    Tensor::new(vec![v.frames.len(), f.height, f.width, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: usize, h: usize) -> RawImage {
        RawImage::from_fn(w, h, |x, y, c| ((x * 7 + y * 13 + c * 29) % 256) as u8).unwrap()
    }

    #[test]
    fn static_video_examples() {
        let img = gradient(5, 4);
        let v = image_to_static_video(&img, 4).unwrap();
        assert_eq!(v.frames.len(), 4);
        assert!(v.is_static);
        assert!(v.frames.iter().all(|f| *f == img));
        let ts = v.timestamps();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        assert!(ts
            .values()
            .iter()
            .zip(expect)
            .all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(
            image_to_static_video(&img, 1)
                .unwrap()
                .timestamps()
                .values(),
            &[0.0]
        );
        assert!(image_to_static_video(&img, 0).is_err());
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_indices(96, 96).unwrap(), (0..96).collect::<Vec<_>>());
        assert_eq!(sample_indices(10, 5).unwrap(), vec![0, 2, 5, 7, 9]);
        assert_eq!(sample_indices(10, 1).unwrap(), vec![0]);
        assert!(sample_indices(5, 6).is_err());
        assert!(sample_indices(5, 0).is_err());
    }

    proptest! {
        #[test]
        fn sampling_is_increasing_with_endpoints(native in 2usize..300, frac in 0.0f64..1.0) {
            let count = 2 + ((native - 2) as f64 * frac) as usize;
            let idx = sample_indices(native, count).unwrap();
            prop_assert_eq!(idx.len(), count);
            prop_assert_eq!(idx[0], 0);
            prop_assert_eq!(*idx.last().unwrap(), native - 1);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    /// Exhaustive argmin over all grids using exact rational comparison.
    fn grid_oracle(w: usize, h: usize, max: usize) -> (usize, usize) {
        let mut cands = vec![];
        for r in 1..=max {
            for c in 1..=max {
                if r * c <= max {
                    cands.push((r, c));
                }
            }
        }
        // |c/r - w/h| = |c·h - w·r| / (r·h); compare cross-multiplied.
        cands.sort_by(|&(r1, c1), &(r2, c2)| {
            let e1 = (c1 * h).abs_diff(w * r1) * (r2 * h);
            let e2 = (c2 * h).abs_diff(w * r2) * (r1 * h);
            e1.cmp(&e2)
                .then((r1 * c1).cmp(&(r2 * c2)))
                .then(c2.cmp(&c1))
        });
        cands[0]
    }

    #[test]
    fn grid_examples() {
        assert_eq!(
            choose_grid(448, 448, 12).unwrap(),
            TileGrid { rows: 1, cols: 1 }
        );
        assert_eq!(
            choose_grid(896, 448, 12).unwrap(),
            TileGrid { rows: 1, cols: 2 }
        );
        assert_eq!(
            choose_grid(1344, 896, 12).unwrap(),
            TileGrid { rows: 2, cols: 3 }
        );
        assert!(choose_grid(10, 10, 0).is_err());
        for (w, h) in [
            (896, 448),
            (1344, 896),
            (1000, 333),
            (333, 1000),
            (640, 480),
            (1920, 1080),
        ] {
            let g = choose_grid(w, h, 12).unwrap();
            assert_eq!((g.rows, g.cols), grid_oracle(w, h, 12), "{w}x{h}");
        }
    }

    #[test]
    fn tiling_reassembles_exactly() {
        let img = gradient(90, 61);
        let tiled = dynamic_tile(&img, 16, 12).unwrap();
        assert!(tiled.tiles.len() <= 12);
        assert!(tiled.tiles.iter().all(|t| t.width == 16 && t.height == 16));
        assert_eq!(
            reassemble_tiles(&tiled.tiles, tiled.grid).unwrap(),
            tiled.resized
        );
        let one = dynamic_tile(&gradient(32, 32), 32, 12).unwrap();
        assert_eq!(one.tiles, vec![gradient(32, 32)]);
    }

    #[test]
    fn normalize_examples() {
        let stats = PixelStats {
            mean: [0.5; 3],
            std: [0.5; 3],
        };
        let black = RawImage::new(1, 1, vec![0, 0, 0]).unwrap();
        let white = RawImage::new(1, 1, vec![255, 255, 255]).unwrap();
        let t = normalize(&[black, white], &stats).unwrap();
        assert_eq!(t.shape(), &[2, 1, 1, 3]);
        assert!(t.data()[..3].iter().all(|&v| v == -1.0));
        assert!(t.data()[3..].iter().all(|&v| v == 1.0));

        let img = gradient(7, 5);
        let stats = PixelStats {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        };
        let back = denormalize(
            &normalize(std::slice::from_ref(&img), &stats).unwrap(),
            &stats,
        )
        .unwrap();
        for (a, &b) in back.data().iter().zip(&img.pixels) {
            assert!((a - b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ppm_round_trip_and_errors() {
        let img = gradient(3, 2);
        let bytes = encode_ppm(&img);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
        let commented = [b"P6\n# a comment\n3 2\n255\n".as_slice(), &img.pixels].concat();
        assert_eq!(decode_ppm(&commented).unwrap(), img);
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n").is_err());
    }

    #[test]
    fn prepare_image_layout() {
        let cfg = PvcConfig::toy();
        let img = gradient(112, 56);
        let p = prepare_image(&img, &cfg, 12).unwrap();
        assert_eq!(p.grid, TileGrid { rows: 1, cols: 2 });
        assert_eq!(p.pixels.shape(), &[2, 4, 56, 56, 3]);
        assert!(p.is_static);
        assert_eq!(p.timestamps.len(), 4);
    }

    #[test]
    fn prepare_video_checks_bounds() {
        let cfg = PvcConfig::toy();
        let frames: Vec<RawImage> = (0..20)
            .map(|i| RawImage::from_fn(8, 8, |x, y, c| (x + y + c + i) as u8).unwrap())
            .collect();
        let v = RawVideo::new(frames).unwrap();
        let p = prepare_video(&v, &cfg, 16, None).unwrap();
        assert_eq!(p.pixels.shape(), &[1, 16, 56, 56, 3]);
        assert!(prepare_video(&v, &cfg, 8, None).is_err());
        assert!(prepare_video(&v, &cfg, 21, None).is_err());
    }

    #[test]
    fn video_tensor_round_trip() {
        let v = RawVideo::new(vec![gradient(4, 3), gradient(4, 3)]).unwrap();
        let t = video_to_tensor(&v).unwrap();
        assert_eq!(video_from_tensor(&t).unwrap(), v);
        assert!(video_from_tensor(&t.scale(0.5).unwrap()).is_err());
        assert!(RawVideo::new(vec![gradient(4, 3), gradient(3, 4)]).is_err());
    }
}
