//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::labels::LabelMap;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("byte {offset}: expected magic {expected}, found {found:?}")]
    Magic {
        offset: usize,
        expected: &'static str,
        found: String,
    },
    #[error("byte {offset}: {msg}")]
    Header { offset: usize, msg: String },
    #[error("byte {offset}: pixel data has {got} bytes, header promises {expected}")]
    Data {
        offset: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> Result<Header, NetpbmError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(NetpbmError::Magic {
            offset: 0,
            expected: magic,
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(NetpbmError::Header {
                offset: pos,
                msg: "expected a decimal number".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| NetpbmError::Header {
                offset: start,
                msg: "number too large".into(),
            })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(NetpbmError::Header {
            offset: pos,
            msg: format!("only 8-bit samples are supported, maxval is {maxval}"),
        });
    }
    if width == 0 || height == 0 {
        return Err(NetpbmError::Header {
            offset: pos,
            msg: "zero-sized image".into(),
        });
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(NetpbmError::Header {
                offset: pos,
                msg: "missing whitespace before pixel data".into(),
            })
        }
    }
    Ok(Header {
        width,
        height,
        data_offset: pos,
    })
}

fn pixel_data<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8], NetpbmError> {
    let expected = header.width * header.height * channels;
    let data = &bytes[header.data_offset..];
    if data.len() != expected {
        return Err(NetpbmError::Data {
            offset: header.data_offset,
            expected,
            got: data.len(),
        });
    }
    Ok(data)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `H×W×3` image with values in `[0, 1]` as P6.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    assert!(s.len() == 3 && s[2] == 3, "PPM needs H×W×3, got {s:?}");
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

/// Encodes raw RGB bytes (`height*width*3`) as P6.
pub fn encode_ppm_rgb(height: usize, width: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), height * width * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, NetpbmError> {
    let header = parse_header(bytes, "P6")?;
    let data = pixel_data(bytes, &header, 3)?;
    Ok(Tensor::new(
        vec![header.height, header.width, 3],
        data.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("header sizes are nonzero"))
}

/// Encodes a label map as P5 with pixel value = label index.
pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    assert!(labels.classes() <= 256, "PGM stores at most 256 labels");
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend(labels.values().iter().map(|&v| v as u8));
    out
}

/// Decodes a P5 file into `(height, width, values)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), NetpbmError> {
    let header = parse_header(bytes, "P5")?;
    let data = pixel_data(bytes, &header, 1)?;
    Ok((header.height, header.width, data.to_vec()))
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), NetpbmError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_tokens() {
        let m = LabelMap::filled(32, 32, 7, 3);
        let bytes = encode_pgm(&m);
        let header: Vec<String> = String::from_utf8_lossy(&bytes[..13])
            .split_whitespace()
            .map(str::to_string)
            .collect();
        assert_eq!(header, ["P5", "32", "32", "255"]);
        assert_eq!(bytes.len(), 13 + 32 * 32);
    }

    #[test]
    fn corrupt_magic_names_offset() {
        let mut bytes = encode_pgm(&LabelMap::filled(2, 2, 3, 1));
        bytes[1] = b'9';
        let err = decode_pgm(&bytes).unwrap_err();
        assert!(matches!(err, NetpbmError::Magic { offset: 0, .. }));
        assert!(err.to_string().contains("byte 0"));
    }

    #[test]
    fn comments_and_bad_lengths() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([4, 5]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (1, 2, vec![4, 5]));
        bytes.push(0);
        assert!(matches!(decode_pgm(&bytes), Err(NetpbmError::Data { .. })));
        assert!(matches!(
            decode_pgm(b"P5\n2 x\n255\n"),
            Err(NetpbmError::Header { offset: 5, .. })
        ));
        assert!(decode_pgm(b"P5 2 2 65535\n").is_err());
    }

    #[test]
    fn ppm_quantizes_to_eight_bits() {
        let img = Tensor::from_fn(&[2, 2, 3], |i| i as f64 / 11.0);
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // quantized images are fixed points
        assert_eq!(encode_ppm(&back), encode_ppm(&img));
    }
}
