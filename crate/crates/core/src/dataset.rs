//! Posed image sets on disk: one camera JSON per view, next to its image.
//!
//! Views are the `*.json` files of a directory in lexicographic order. Each names its
//! image (PPM or PFM) and, optionally, reference depth and normal maps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{read_image, write_image, Image};
use crate::losses::GeometryTarget;
use crate::scene::{Camera, CameraJson};

#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
    pub geometry: Option<GeometryTarget>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub views: Vec<View>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

fn check_shape(what: &Path, img: &Image, cam: &Camera, channels: usize) -> Result<()> {
    if img.width != cam.width || img.height != cam.height || img.channels != channels {
        return Err(Error::parse(
            what.display().to_string(),
            format!(
                "{}x{}x{} image for a {}x{} camera (want {} channels)",
                img.width, img.height, img.channels, cam.width, cam.height, channels
            ),
        ));
    }
    Ok(())
}

pub fn load_view(json_path: &Path) -> Result<View> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let cj: CameraJson =
        serde_json::from_str(&text).map_err(|e| Error::parse(json_path.display().to_string(), e))?;
    let camera = cj.to_camera()?;
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let image_name = cj
        .image
        .as_ref()
        .ok_or_else(|| Error::parse(json_path.display().to_string(), "missing \"image\" field"))?;
    let image_path = dir.join(image_name);
    let image = read_image(&image_path)?;
    check_shape(&image_path, &image, &camera, 3)?;
    let geometry = match (&cj.depth, &cj.normal) {
        (Some(d), Some(n)) => {
            let (dp, np) = (dir.join(d), dir.join(n));
            let depth = read_image(&dp)?;
            check_shape(&dp, &depth, &camera, 1)?;
            let normal = read_image(&np)?;
            check_shape(&np, &normal, &camera, 3)?;
            Some(GeometryTarget {
                mask: depth.data.iter().map(|d| *d > 0.0 && d.is_finite()).collect(),
                normal: (0..normal.pixel_count()).map(|i| normal.rgb(i)).collect(),
                depth: depth.data,
            })
        }
        (None, None) => None,
        _ => {
            return Err(Error::parse(
                json_path.display().to_string(),
                "depth and normal maps must be given together",
            ))
        }
    };
    let name = json_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(View {
        name,
        camera,
        image,
        geometry,
    })
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::parse(dir.display().to_string(), "no camera files (*.json)"));
    }
    let views = paths.iter().map(|p| load_view(p)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { views })
}

/// Writes `<name>.json` and `<name>.pfm` (plus geometry maps, if any) for every view.
/// PFM keeps the rendered values exact to single precision; PPM is lossy.
pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset, ppm: bool) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in &data.views {
        let mut cj = v.camera.to_json();
        let image_name = format!("{}.{}", v.name, if ppm { "ppm" } else { "pfm" });
        write_image(&v.image, dir.join(&image_name))?;
        cj.image = Some(image_name);
        if let Some(g) = &v.geometry {
            let (w, h) = (v.camera.width, v.camera.height);
            let depth: Vec<f64> = g
                .depth
                .iter()
                .zip(&g.mask)
                .map(|(d, m)| if *m { *d } else { 0.0 })
                .collect();
            let dn = format!("{}.depth.pfm", v.name);
            let nn = format!("{}.normal.pfm", v.name);
            write_image(&Image::from_gray(w, h, depth), dir.join(&dn))?;
            write_image(&Image::from_rgb(w, h, &g.normal), dir.join(&nn))?;
            cj.depth = Some(dn);
            cj.normal = Some(nn);
        }
        let path = dir.join(format!("{}.json", v.name));
        let text = serde_json::to_string_pretty(&cj).expect("camera serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
