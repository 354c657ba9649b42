//! Scene file format: a JSON document with `shelf`, `objects`, and the
//! target referenced by name. All lengths are written in meters with six
//! decimal places, which makes corpus files byte-stable across runs.

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{ObjectSpec, PlacedObject, Scene, ShelfSpec};

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("scene file is malformed: {0}")]
    BadFile(String),
    #[error("target '{0}' is not among the scene objects")]
    UnknownTarget(String),
    #[error("scene is invalid: {0}")]
    Invalid(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn m(v: f64) -> String {
    format!("{v:.6}")
}

/// Write a scene in the canonical 6-decimal format.
pub fn write_scene(w: &mut impl Write, scene: &Scene) -> Result<(), SceneIoError> {
    let sh = &scene.shelf;
    writeln!(w, "{{")?;
    writeln!(
        w,
        "  \"shelf\": {{\"width\": {}, \"depth\": {}, \"height\": {}, \"camera_offset\": {}}},",
        m(sh.width),
        m(sh.depth),
        m(sh.height),
        m(sh.camera_offset)
    )?;
    writeln!(w, "  \"objects\": [")?;
    for (i, obj) in scene.objects.iter().enumerate() {
        let cats: Vec<String> = obj
            .spec
            .category_path
            .iter()
            .map(|c| serde_json::to_string(c).expect("string encodes"))
            .collect();
        let sep = if i + 1 < scene.objects.len() { "," } else { "" };
        writeln!(
            w,
            "    {{\"name\": {}, \"dims\": [{}, {}, {}], \"position\": [{}, {}], \"category_path\": [{}]}}{}",
            serde_json::to_string(&obj.spec.name).expect("string encodes"),
            m(obj.spec.dims[0]),
            m(obj.spec.dims[1]),
            m(obj.spec.dims[2]),
            m(obj.position[0]),
            m(obj.position[1]),
            cats.join(", "),
            sep
        )?;
    }
    writeln!(w, "  ],")?;
    writeln!(
        w,
        "  \"target\": {}",
        serde_json::to_string(&scene.target().spec.name).expect("string encodes")
    )?;
    writeln!(w, "}}")?;
    Ok(())
}

/// Read and validate a scene file.
pub fn read_scene(r: &mut impl BufRead) -> Result<Scene, SceneIoError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| SceneIoError::BadFile(e.to_string()))?;
    let shelf_v = v
        .get("shelf")
        .ok_or_else(|| SceneIoError::BadFile("missing shelf".into()))?;
    let num = |obj: &serde_json::Value, key: &str| -> Result<f64, SceneIoError> {
        obj.get(key)
            .and_then(|x| x.as_f64())
            .ok_or_else(|| SceneIoError::BadFile(format!("missing number '{key}'")))
    };
    let shelf = ShelfSpec {
        width: num(shelf_v, "width")?,
        depth: num(shelf_v, "depth")?,
        height: num(shelf_v, "height")?,
        camera_offset: num(shelf_v, "camera_offset")?,
    };
    let objects_v = v
        .get("objects")
        .and_then(|x| x.as_array())
        .ok_or_else(|| SceneIoError::BadFile("missing objects array".into()))?;
    let mut objects = Vec::with_capacity(objects_v.len());
    for obj_v in objects_v {
        let name = obj_v
            .get("name")
            .and_then(|x| x.as_str())
            .ok_or_else(|| SceneIoError::BadFile("object missing name".into()))?
            .to_string();
        let arr = |key: &str, n: usize| -> Result<Vec<f64>, SceneIoError> {
            let a = obj_v
                .get(key)
                .and_then(|x| x.as_array())
                .ok_or_else(|| SceneIoError::BadFile(format!("object missing '{key}'")))?;
            if a.len() != n {
                return Err(SceneIoError::BadFile(format!(
                    "'{key}' must have {n} entries"
                )));
            }
            a.iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| SceneIoError::BadFile(format!("bad number in '{key}'")))
                })
                .collect()
        };
        let dims = arr("dims", 3)?;
        let pos = arr("position", 2)?;
        let category_path = obj_v
            .get("category_path")
            .and_then(|x| x.as_array())
            .map(|a| {
                a.iter()
                    .filter_map(|x| x.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        objects.push(PlacedObject {
            spec: ObjectSpec {
                name,
                dims: [dims[0], dims[1], dims[2]],
                category_path,
            },
            position: [pos[0], pos[1]],
        });
    }
    let target_name = v
        .get("target")
        .and_then(|x| x.as_str())
        .ok_or_else(|| SceneIoError::BadFile("missing target".into()))?;
    let target_index = objects
        .iter()
        .position(|o| o.spec.name == target_name)
        .ok_or_else(|| SceneIoError::UnknownTarget(target_name.to_string()))?;
    let scene = Scene {
        shelf,
        objects,
        target_index,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<(), SceneIoError> {
    let mut buf = Vec::new();
    write_scene(&mut buf, scene)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneIoError> {
    let file = std::fs::File::open(path)?;
    read_scene(&mut std::io::BufReader::new(file))
}
