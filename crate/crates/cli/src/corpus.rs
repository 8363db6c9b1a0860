//! Solved-problem corpus for `build-kb`: one `*.solution.json` per problem.
//!
//! ```json
//! {"id": "two-sum", "statement": "...", "category": "hash_table",
//!  "solution_code": "def f(...): ...", "steps": ["...", "..."]}
//! ```
//!
//! `steps` may be omitted when `solution_code` is present; the model then
//! decomposes the solution.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use kbmcts::gateway::Gateway;
use kbmcts::kb::CorpusItem;
use kbmcts::problem::Step;

pub const SOLUTION_SUFFIX: &str = ".solution.json";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionFile {
    pub id: String,
    pub statement: String,
    pub category: String,
    #[serde(default)]
    pub solution_code: Option<String>,
    #[serde(default)]
    pub steps: Option<Vec<String>>,
}

pub fn solution_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading corpus {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.to_string_lossy().ends_with(SOLUTION_SUFFIX) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_solutions(dir: &Path) -> Result<Vec<SolutionFile>> {
    let files = solution_files(dir)?;
    if files.is_empty() {
        bail!("corpus {} has no *{SOLUTION_SUFFIX} files", dir.display());
    }
    files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

/// Turns solution files into corpus items, decomposing solutions that have
/// no annotated steps. `gateway` is only needed in that case.
pub fn to_corpus(files: Vec<SolutionFile>, gateway: Option<&Gateway>) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::with_capacity(files.len());
    for f in files {
        let steps = match (&f.steps, &f.solution_code) {
            (Some(texts), _) => texts
                .iter()
                .enumerate()
                .map(|(i, t)| Step::new(i + 1, t).with_context(|| format!("{}: step {}", f.id, i + 1)))
                .collect::<Result<Vec<_>>>()?,
            (None, Some(code)) => {
                let Some(gw) = gateway else {
                    bail!("{}: no annotated steps and no model backend to decompose the solution", f.id);
                };
                gw.decompose_solution(&f.statement, code)
                    .with_context(|| format!("{}: decomposing solution", f.id))?
            }
            (None, None) => bail!("{}: needs either steps or solution_code", f.id),
        };
        items.push(CorpusItem {
            problem_id: f.id,
            statement: f.statement,
            category: f.category,
            steps,
        });
    }
    Ok(items)
}

/// Whether any file needs the model to produce its steps.
pub fn needs_decomposition(files: &[SolutionFile]) -> bool {
    files.iter().any(|f| f.steps.is_none())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(id: &str, steps: Option<&[&str]>, code: Option<&str>) -> SolutionFile {
        SolutionFile {
            id: id.into(),
            statement: "s".into(),
            category: "math".into(),
            solution_code: code.map(String::from),
            steps: steps.map(|s| s.iter().map(|x| x.to_string()).collect()),
        }
    }

    #[test]
    fn annotated_steps_are_used_verbatim() {
        let items = to_corpus(vec![file("a", Some(&["one", "two  words"]), None)], None).unwrap();
        assert_eq!(items[0].steps[1].text, "two words");
        assert_eq!(items[0].steps[1].index, 2);
    }

    #[test]
    fn missing_steps_need_a_backend() {
        let files = vec![file("a", None, Some("def f(): pass"))];
        assert!(needs_decomposition(&files));
        let err = to_corpus(files, None).unwrap_err();
        assert!(err.to_string().contains("a:"));
        assert!(to_corpus(vec![file("b", None, None)], None).is_err());
    }
}
