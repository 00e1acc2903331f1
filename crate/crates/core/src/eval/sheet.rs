use crate::data::{Image, Mask};
use crate::error::{Error, Result};

/// Gap between tiles, in pixels.
const GAP: usize = 2;
const GAP_VALUE: f32 = 1.0;

/// Grey-scale rendering of a mask, for placing masks next to images.
pub fn mask_image(mask: &Mask) -> Image {
    Image::from_fn(mask.height(), mask.width(), |y, x| {
        [if mask.get(y, x) { 1.0 } else { 0.0 }; 3]
    })
}

/// Tiles rows of equally sized images into one picture separated by white
/// gaps. Rows may be ragged; missing tiles stay white.
pub fn contact_sheet(rows: &[Vec<Image>]) -> Result<Image> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Contract("contact sheet needs at least one image".into()))?;
    let (th, tw) = (first.height(), first.width());
    if let Some(bad) = rows
        .iter()
        .flatten()
        .find(|i| (i.height(), i.width()) != (th, tw))
    {
        return Err(Error::dim(
            "contact_sheet",
            &[th, tw],
            &[bad.height(), bad.width()],
        ));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let height = rows.len() * (th + GAP) - GAP;
    let width = cols * (tw + GAP) - GAP;
    let mut sheet = Image::from_fn(height, width, |_, _| [GAP_VALUE; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (y0, x0) = (r * (th + GAP), c * (tw + GAP));
            for y in 0..th {
                for x in 0..tw {
                    sheet.set_pixel(y0 + y, x0 + x, tile.pixel(y, x));
                }
            }
        }
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_land_in_place() {
        let a = Image::from_fn(3, 3, |_, _| [0.0; 3]);
        let b = Image::from_fn(3, 3, |_, _| [0.5; 3]);
        let sheet = contact_sheet(&[vec![a.clone(), b.clone()], vec![b]]).unwrap();
        assert_eq!((sheet.height(), sheet.width()), (8, 8));
        assert_eq!(sheet.pixel(0, 0), [0.0; 3]);
        assert_eq!(sheet.pixel(0, 5), [0.5; 3]);
        assert_eq!(sheet.pixel(0, 3), [GAP_VALUE; 3]);
        assert_eq!(sheet.pixel(5, 0), [0.5; 3]);
        assert_eq!(sheet.pixel(5, 5), [GAP_VALUE; 3]);
        assert!(contact_sheet(&[]).is_err());
        let small = Image::from_fn(2, 2, |_, _| [0.0; 3]);
        assert!(contact_sheet(&[vec![a, small]]).is_err());
    }
}
