//! Binary 8-bit greymap (PGM `P5`) reading and writing.

use std::io::{self, Read, Write};

use crate::tactsim::TactileImage;

/// Quantizes an intensity in `[0, 1]` to a byte as `round(p * 255)`.
pub fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(img: &TactileImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| quantize(p)));
    out
}

pub fn write<W: Write>(mut w: W, img: &TactileImage) -> io::Result<()> {
    w.write_all(&encode(img))
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Decodes a `P5` greymap with maxval 255 (comments in the header allowed).
pub fn decode(bytes: &[u8]) -> io::Result<TactileImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid PGM header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM (maxval 255) is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated PGM raster"))?;
    let pixels = data.iter().map(|&b| b as f32 / 255.0).collect();
    TactileImage::from_pixels(w, h, pixels).map_err(|e| bad(&e.to_string()))
}

pub fn read<R: Read>(mut r: R) -> io::Result<TactileImage> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_quantization_are_exact() {
        let img = TactileImage::from_pixels(3, 2, vec![0.0, 0.5, 1.0, 0.2, 0.998, 0.001]).unwrap();
        let bytes = encode(&img);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 51, 254, 0]);
    }

    #[test]
    fn decode_accepts_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn quantized_images_round_trip_bit_exact() {
        let img = TactileImage::from_pixels(4, 1, vec![0.0, 0.25, 0.75, 1.0]).unwrap().quantized();
        let back = decode(&encode(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
