//! Minimal PNG writer: 8-bit RGB, no interlace, stored (uncompressed)
//! deflate blocks.

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
const MAX_STORED: usize = 65_535;

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    let start = out.len();
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
}

fn zlib_stored(raw: &[u8]) -> Vec<u8> {
    let mut z = Vec::with_capacity(raw.len() + raw.len() / MAX_STORED * 5 + 16);
    z.extend_from_slice(&[0x78, 0x01]);
    let mut blocks = raw.chunks(MAX_STORED).peekable();
    if blocks.peek().is_none() {
        z.extend_from_slice(&[1, 0, 0, 0xff, 0xff]);
    }
    while let Some(b) = blocks.next() {
        z.push(u8::from(blocks.peek().is_none()));
        let len = b.len() as u16;
        z.extend_from_slice(&len.to_le_bytes());
        z.extend_from_slice(&(!len).to_le_bytes());
        z.extend_from_slice(b);
    }
    let mut adler = adler2::Adler32::new();
    adler.write_slice(raw);
    z.extend_from_slice(&adler.checksum().to_be_bytes());
    z
}

/// Encodes `rgb` (row-major, 3 bytes per pixel) as a PNG file.
pub fn encode_rgb(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer size");
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(height as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]);
    let mut raw = Vec::with_capacity(height * (width * 3 + 1));
    for row in rgb.chunks(width * 3).take(height) {
        raw.push(0);
        raw.extend_from_slice(row);
    }
    let mut out = SIGNATURE.to_vec();
    chunk(&mut out, b"IHDR", &ihdr);
    chunk(&mut out, b"IDAT", &zlib_stored(&raw));
    chunk(&mut out, b"IEND", &[]);
    out
}

/// Inverse of [`encode_rgb`] for files it produced (stored blocks only).
pub fn decode_rgb(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    if bytes.get(..8)? != SIGNATURE {
        return None;
    }
    let mut pos = 8;
    let (mut width, mut height) = (0usize, 0usize);
    let mut idat = Vec::new();
    while pos + 12 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().ok()?) as usize;
        let kind = &bytes[pos + 4..pos + 8];
        let data = bytes.get(pos + 8..pos + 8 + len)?;
        let crc = u32::from_be_bytes(bytes.get(pos + 8 + len..pos + 12 + len)?.try_into().ok()?);
        if crc32fast::hash(&bytes[pos + 4..pos + 8 + len]) != crc {
            return None;
        }
        match kind {
            b"IHDR" => {
                width = u32::from_be_bytes(data[0..4].try_into().ok()?) as usize;
                height = u32::from_be_bytes(data[4..8].try_into().ok()?) as usize;
                if data[8..13] != [8, 2, 0, 0, 0] {
                    return None;
                }
            }
            b"IDAT" => idat.extend_from_slice(data),
            b"IEND" => break,
            _ => {}
        }
        pos += 12 + len;
    }
    let mut raw = Vec::new();
    let mut p = 2;
    loop {
        let last = *idat.get(p)? & 1;
        let len = u16::from_le_bytes(idat.get(p + 1..p + 3)?.try_into().ok()?) as usize;
        raw.extend_from_slice(idat.get(p + 5..p + 5 + len)?);
        p += 5 + len;
        if last == 1 {
            break;
        }
    }
    let mut adler = adler2::Adler32::new();
    adler.write_slice(&raw);
    if idat.get(p..p + 4)? != adler.checksum().to_be_bytes() {
        return None;
    }
    let mut rgb = Vec::with_capacity(width * height * 3);
    for row in raw.chunks(width * 3 + 1) {
        if row[0] != 0 {
            return None;
        }
        rgb.extend_from_slice(&row[1..]);
    }
    (rgb.len() == width * height * 3).then_some((width, height, rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_structure() {
        let (w, h) = (7, 5);
        let rgb: Vec<u8> = (0..w * h * 3).map(|i| (i * 37 % 256) as u8).collect();
        let png = encode_rgb(w, h, &rgb);
        assert_eq!(&png[..8], &SIGNATURE);
        assert_eq!(&png[12..16], b"IHDR");
        assert_eq!(decode_rgb(&png), Some((w, h, rgb)));
    }

    #[test]
    fn large_image_spans_several_blocks() {
        let (w, h) = (300, 100);
        let rgb: Vec<u8> = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
        assert_eq!(decode_rgb(&encode_rgb(w, h, &rgb)).unwrap().2, rgb);
    }

    #[test]
    fn known_crc_and_adler() {
        // IEND chunk CRC is a fixed constant
        let png = encode_rgb(1, 1, &[0, 0, 0]);
        assert_eq!(&png[png.len() - 4..], &[0xae, 0x42, 0x60, 0x82]);
        let mut a = adler2::Adler32::new();
        a.write_slice(b"Wikipedia");
        assert_eq!(a.checksum(), 0x11e6_0398);
    }

    #[test]
    fn corrupted_byte_detected() {
        let mut png = encode_rgb(4, 4, &[9; 48]);
        let n = png.len();
        png[n - 20] ^= 1;
        assert_eq!(decode_rgb(&png), None);
    }
}
