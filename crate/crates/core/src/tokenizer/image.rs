use std::io::{BufRead, Read, Write};

use super::{Modality, SourceMeta, TokenSequence};
use crate::error::{Error, Result};

/// Patch side length in pixels.
pub const PATCH: usize = 16;

/// 8-bit RGB image, pixels row-major with channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Channels(channels));
        }
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage { width, height });
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Reads a binary PPM (P6) with a maxval of 255.
    pub fn read_ppm(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            fields.push(ppm_field(&mut r)?);
        }
        if fields[0] != "P6" {
            return Err(Error::Format("only binary PPM (P6) images are supported".into()));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header value {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval must be 255, got {maxval}")));
        }
        let mut pixels = Vec::new();
        r.read_to_end(&mut pixels)?;
        if pixels.len() < width * height * 3 {
            return Err(Error::Format("PPM pixel data is truncated".into()));
        }
        pixels.truncate(width * height * 3);
        Image::new(width, height, 3, pixels)
    }

    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 20);
        self.write_ppm(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

/// Next whitespace-separated PPM header token, skipping `#` comments.
/// Consumes exactly one whitespace byte after the token.
fn ppm_field(r: &mut impl BufRead) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("PPM header is truncated".into()));
        }
        let b = byte[0];
        if b == b'#' && token.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)?;
        } else if b.is_ascii_whitespace() {
            if !token.is_empty() {
                return Ok(token);
            }
        } else {
            token.push(b as char);
        }
    }
}

fn padded(n: usize) -> usize {
    n.div_ceil(PATCH) * PATCH
}

/// Flattens an image into sub-pixel tokens.
///
/// The image is padded right and bottom to multiples of [`PATCH`] by
/// repeating its edge pixels. Patches are visited row-major over the patch
/// grid, pixels row-major within a patch, and each pixel emits R, G, B.
pub fn tokenize_image(image: &Image) -> TokenSequence {
    let (pw, ph) = (padded(image.width), padded(image.height));
    let mut ids = Vec::with_capacity(pw * ph * 3);
    for py in (0..ph).step_by(PATCH) {
        for px in (0..pw).step_by(PATCH) {
            for y in py..py + PATCH {
                for x in px..px + PATCH {
                    let p = image.pixel(x.min(image.width - 1), y.min(image.height - 1));
                    ids.extend(p.iter().map(|&c| c as u32));
                }
            }
        }
    }
    TokenSequence {
        ids,
        modality: Modality::Image,
        meta: SourceMeta::Image {
            width: image.width,
            height: image.height,
            pad_right: pw - image.width,
            pad_bottom: ph - image.height,
        },
    }
}

/// Number of tokens an image of the given size produces.
pub fn image_token_count(width: usize, height: usize) -> usize {
    padded(width) * padded(height) * 3
}

/// Inverse of [`tokenize_image`]; padding is dropped.
pub fn detokenize_image(ids: &[u32], width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyImage { width, height });
    }
    let expected = image_token_count(width, height);
    if ids.len() != expected {
        return Err(Error::TokenCount { expected, found: ids.len() });
    }
    if let Some(&id) = ids.iter().find(|&&id| id > 255) {
        return Err(Error::Modality { id, expected: Modality::Image });
    }
    let pw = padded(width);
    let mut pixels = vec![0u8; width * height * 3];
    let mut t = 0;
    for py in (0..padded(height)).step_by(PATCH) {
        for px in (0..pw).step_by(PATCH) {
            for y in py..py + PATCH {
                for x in px..px + PATCH {
                    if x < width && y < height {
                        let i = (y * width + x) * 3;
                        for c in 0..3 {
                            pixels[i + c] = ids[t + c] as u8;
                        }
                    }
                    t += 3;
                }
            }
        }
    }
    Image::new(width, height, 3, pixels)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn gradient(width: usize, height: usize) -> Image {
        let pixels = (0..width * height * 3).map(|i| (i * 7 % 251) as u8).collect();
        Image::new(width, height, 3, pixels).unwrap()
    }

    #[test]
    fn first_pixel_leads_the_stream() {
        let mut pixels = vec![0u8; 16 * 16 * 3];
        pixels[..3].copy_from_slice(&[10, 20, 30]);
        let img = Image::new(16, 16, 3, pixels).unwrap();
        let seq = tokenize_image(&img);
        assert_eq!(&seq.ids[..3], &[10, 20, 30]);
        assert_eq!(detokenize_image(&seq.ids, 16, 16).unwrap(), img);
    }

    #[test]
    fn black_16x16_is_768_zeros() {
        let img = Image::new(16, 16, 3, vec![0; 768]).unwrap();
        let seq = tokenize_image(&img);
        assert_eq!(seq.ids, vec![0; 768]);
    }

    #[test]
    fn odd_sizes_pad_to_whole_patches() {
        let img = gradient(17, 20);
        let seq = tokenize_image(&img);
        assert_eq!(seq.ids.len(), 32 * 32 * 3);
        assert_eq!(seq.ids.len(), 3072);
        assert_eq!(
            seq.meta,
            SourceMeta::Image { width: 17, height: 20, pad_right: 15, pad_bottom: 12 }
        );
    }

    #[test]
    fn patch_order_and_edge_replication() {
        let img = gradient(17, 1);
        let seq = tokenize_image(&img);
        // Second patch starts at column 16; its remaining columns repeat it.
        let second = &seq.ids[PATCH * PATCH * 3..];
        let edge: Vec<u32> = img.pixel(16, 0).iter().map(|&c| c as u32).collect();
        for px in 0..PATCH * PATCH {
            assert_eq!(&second[px * 3..px * 3 + 3], &edge[..]);
        }
        // Row 1 of the first patch replicates row 0.
        assert_eq!(&seq.ids[..PATCH * 3], &seq.ids[PATCH * 3..PATCH * 6]);
    }

    #[test]
    fn single_pixel_round_trips() {
        let img = Image::new(1, 1, 3, vec![1, 2, 3]).unwrap();
        let seq = tokenize_image(&img);
        assert_eq!(seq.ids.len(), 768);
        assert_eq!(detokenize_image(&seq.ids, 1, 1).unwrap(), img);
    }

    #[test]
    fn random_48x80_round_trips() {
        let img = gradient(48, 80);
        assert_eq!(detokenize_image(&tokenize_image(&img).ids, 48, 80).unwrap(), img);
    }

    #[test]
    fn bad_inputs_error() {
        assert!(matches!(Image::new(2, 2, 4, vec![0; 16]), Err(Error::Channels(4))));
        assert!(matches!(Image::new(0, 2, 3, vec![]), Err(Error::EmptyImage { .. })));
        assert!(matches!(
            detokenize_image(&[0; 767], 1, 1),
            Err(Error::TokenCount { expected: 768, found: 767 })
        ));
        assert!(detokenize_image(&[300; 768], 1, 1).is_err());
    }

    #[test]
    fn ppm_round_trip_with_comments() {
        let img = gradient(5, 3);
        let bytes = img.to_ppm();
        assert_eq!(Image::read_ppm(&bytes[..]).unwrap(), img);
        let mut commented = b"P6\n# made by hand\n5 3\n255\n".to_vec();
        commented.extend_from_slice(img.pixels());
        assert_eq!(Image::read_ppm(&commented[..]).unwrap(), img);
        assert!(Image::read_ppm(&b"P3\n1 1\n255\n0 0 0"[..]).is_err());
        assert!(Image::read_ppm(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn images_round_trip(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
            let pixels = (0..w * h * 3)
                .map(|i| (seed.wrapping_mul(i as u64 + 1).rotate_left(17) >> 7) as u8)
                .collect();
            let img = Image::new(w, h, 3, pixels).unwrap();
            let seq = tokenize_image(&img);
            prop_assert_eq!(seq.ids.len(), w.div_ceil(16) * 16 * h.div_ceil(16) * 16 * 3);
            prop_assert!(seq.ids.iter().all(|&id| id < 256));
            prop_assert_eq!(detokenize_image(&seq.ids, w, h).unwrap(), img);
        }
    }
}
