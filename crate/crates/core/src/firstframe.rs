//! First-frame garment editing.
//!
//! An editor turns the source video's first frame, an instruction and a
//! garment image into an edited frame. Three implementations are provided:
//! the exact oracle for synthetic scenes, an identity editor, and external
//! programs that speak a small file protocol:
//!
//! ```text
//! <request dir>/i0.tns        first frame, C×H×W
//! <request dir>/garment.tns   garment image, C×H_g×W_g
//! <request dir>/request.json  {"instruction", "dims", "garment_dims", "torso_quad"?}
//! ```
//!
//! The program receives the request directory as its last argument and must
//! write `<request dir>/ir.tns` with the same shape as `i0.tns`.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array3, Ix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{texture_torso, Quad};
use crate::tensor::{read_tns, write_tns};

pub const REQUEST_FILE: &str = "request.json";
pub const FIRST_FRAME_FILE: &str = "i0.tns";
pub const GARMENT_FILE: &str = "garment.tns";
pub const RESULT_FILE: &str = "ir.tns";

#[derive(Debug, Clone, PartialEq)]
pub struct EditorRequest {
    pub first_frame: Array3<f32>,
    pub instruction: String,
    pub garment: Array3<f32>,
    /// Frame-0 torso corners; only synthetic scenes have them.
    pub torso_quad: Option<Quad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditorResult {
    pub edited: Array3<f32>,
    pub editor: String,
}

pub trait FirstFrameEditor {
    fn name(&self) -> &str;
    fn edit(&self, request: &EditorRequest) -> Result<EditorResult>;
}

/// Re-textures the frame-0 torso with the requested garment.
pub fn oracle_edit(request: &EditorRequest) -> Result<EditorResult> {
    let quad = request.torso_quad.as_ref().ok_or_else(|| Error::Editor {
        editor: OracleEditor.name().into(),
        reason: "request carries no scene metadata; register a plug-in editor for real footage".into(),
    })?;
    let mut edited = request.first_frame.clone();
    texture_torso(&mut edited, quad, &request.garment.view());
    Ok(EditorResult {
        edited,
        editor: OracleEditor.name().into(),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleEditor;

impl FirstFrameEditor for OracleEditor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn edit(&self, request: &EditorRequest) -> Result<EditorResult> {
        oracle_edit(request)
    }
}

/// Returns the first frame unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEditor;

impl FirstFrameEditor for IdentityEditor {
    fn name(&self) -> &str {
        "identity"
    }

    fn edit(&self, request: &EditorRequest) -> Result<EditorResult> {
        Ok(EditorResult {
            edited: request.first_frame.clone(),
            editor: self.name().into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestDescriptor {
    pub instruction: String,
    pub dims: [usize; 3],
    pub garment_dims: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub torso_quad: Option<Quad>,
}

/// Writes a request directory.
pub fn write_request(dir: &Path, request: &EditorRequest) -> Result<()> {
    write_tns(&dir.join(FIRST_FRAME_FILE), &request.first_frame.view().into_dyn())?;
    write_tns(&dir.join(GARMENT_FILE), &request.garment.view().into_dyn())?;
    let dims = |a: &Array3<f32>| {
        let (c, h, w) = a.dim();
        [c, h, w]
    };
    let desc = RequestDescriptor {
        instruction: request.instruction.clone(),
        dims: dims(&request.first_frame),
        garment_dims: dims(&request.garment),
        torso_quad: request.torso_quad,
    };
    let path = dir.join(REQUEST_FILE);
    let text = serde_json::to_string_pretty(&desc).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_frame(path: &Path) -> Result<Array3<f32>> {
    read_tns(path)?.into_dimensionality::<Ix3>().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "expected a 3-D C×H×W tensor".into(),
    })
}

/// Reads a request directory written by [`write_request`].
pub fn read_request(dir: &Path) -> Result<EditorRequest> {
    let path = dir.join(REQUEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let desc: RequestDescriptor = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    Ok(EditorRequest {
        first_frame: read_frame(&dir.join(FIRST_FRAME_FILE))?,
        instruction: desc.instruction,
        garment: read_frame(&dir.join(GARMENT_FILE))?,
        torso_quad: desc.torso_quad,
    })
}

/// Answers a request directory with `editor`; the server side of the plug-in protocol.
pub fn serve_request(dir: &Path, editor: &dyn FirstFrameEditor) -> Result<()> {
    let request = read_request(dir)?;
    let result = editor.edit(&request)?;
    write_tns(&dir.join(RESULT_FILE), &result.edited.view().into_dyn())
}

/// An external editor program.
#[derive(Debug, Clone)]
pub struct ProcessEditor {
    name: String,
    program: PathBuf,
    args: Vec<String>,
}

pub fn plug_editor(name: &str, program: impl Into<PathBuf>, args: &[&str]) -> ProcessEditor {
    ProcessEditor {
        name: name.to_string(),
        program: program.into(),
        args: args.iter().map(|s| s.to_string()).collect(),
    }
}

impl ProcessEditor {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Editor {
            editor: self.name.clone(),
            reason: reason.into(),
        }
    }
}

impl FirstFrameEditor for ProcessEditor {
    fn name(&self) -> &str {
        &self.name
    }

    fn edit(&self, request: &EditorRequest) -> Result<EditorResult> {
        let dir = tempfile::tempdir().map_err(|e| self.fail(format!("cannot create request directory: {e}")))?;
        write_request(dir.path(), request)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(dir.path())
            .status()
            .map_err(|e| self.fail(format!("cannot launch {}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(self.fail(format!("exited with {status}")));
        }
        let out = dir.path().join(RESULT_FILE);
        if !out.exists() {
            return Err(self.fail(format!("no {RESULT_FILE} written")));
        }
        let edited = read_frame(&out).map_err(|e| self.fail(e.to_string()))?;
        if edited.dim() != request.first_frame.dim() {
            return Err(self.fail(format!(
                "shape contract violated: returned {:?}, expected {:?}",
                edited.dim(),
                request.first_frame.dim()
            )));
        }
        Ok(EditorResult {
            edited,
            editor: self.name.clone(),
        })
    }
}

/// Wraps an editor and counts invocations.
pub struct CountingEditor<'a> {
    inner: &'a dyn FirstFrameEditor,
    calls: Cell<usize>,
}

impl<'a> CountingEditor<'a> {
    pub fn new(inner: &'a dyn FirstFrameEditor) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl FirstFrameEditor for CountingEditor<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn edit(&self, request: &EditorRequest) -> Result<EditorResult> {
        self.calls.set(self.calls.get() + 1);
        self.inner.edit(request)
    }
}

/// Checks the editor result against the request's frame shape and pixel range.
pub fn validate_result(request: &EditorRequest, result: &EditorResult) -> Result<()> {
    let fail = |reason: String| {
        Err(Error::Editor {
            editor: result.editor.clone(),
            reason,
        })
    };
    if result.edited.dim() != request.first_frame.dim() {
        return fail(format!(
            "edited frame {:?} does not match first frame {:?}",
            result.edited.dim(),
            request.first_frame.dim()
        ));
    }
    if result.edited.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return fail("edited frame leaves the [0, 1] range".into());
    }
    Ok(())
}
