//! Task prompt templates and seeded instantiation.

use serde::{Deserialize, Serialize};

use uvlm_core::rng::SeededRng;
use uvlm_core::tokens::{IMAGE_PLACEHOLDER, VIDEO_PLACEHOLDER};

use crate::data::{DataError, TaskKind};

pub const CLASS_PLACEHOLDER: &str = "<class>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplatePool {
    pub task_kind: TaskKind,
    pub templates: Vec<String>,
}

impl TemplatePool {
    pub fn new(task_kind: TaskKind, templates: Vec<String>) -> Result<Self, DataError> {
        let pool = TemplatePool { task_kind, templates };
        pool.validate()?;
        Ok(pool)
    }

    /// Every template must carry the modality placeholder its task needs.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.templates.is_empty() {
            return Err(DataError::Template(format!(
                "empty template pool for {}",
                self.task_kind.as_str()
            )));
        }
        let required = match self.task_kind {
            TaskKind::VideoCaption => VIDEO_PLACEHOLDER,
            _ => IMAGE_PLACEHOLDER,
        };
        for t in &self.templates {
            if !t.contains(required) {
                return Err(DataError::Template(format!(
                    "template {t:?} lacks required placeholder {required}"
                )));
            }
        }
        Ok(())
    }

    pub fn uses_class(&self) -> bool {
        self.templates.iter().any(|t| t.contains(CLASS_PLACEHOLDER))
    }

    /// Uniform seeded choice with all placeholders substituted.
    pub fn instantiate(&self, class_tag: Option<&str>, seed: u64) -> Result<String, DataError> {
        let mut rng = SeededRng::new(seed);
        let chosen = &self.templates[rng.index(self.templates.len())];
        let needs_class = chosen.contains(CLASS_PLACEHOLDER);
        let text = match (needs_class, class_tag) {
            (true, Some(tag)) => chosen.replace(CLASS_PLACEHOLDER, tag),
            (true, None) => {
                return Err(DataError::Template(format!(
                    "template {chosen:?} needs a class tag"
                )))
            }
            (false, _) => chosen.clone(),
        };
        if text.contains(CLASS_PLACEHOLDER) {
            return Err(DataError::Template("unsubstituted <class>".into()));
        }
        Ok(text)
    }

    /// Built-in pools per task; VQA questions are synthesized directly
    /// rather than templated.
    pub fn default_for(task: TaskKind) -> Option<TemplatePool> {
        let templates: Vec<&str> = match task {
            TaskKind::Salient => vec![
                "<image> What makes the image stand out?",
                "<image> What is salient one in this image?",
                "<image> Look at the image, segment the main object in the picture and explain.",
            ],
            TaskKind::VideoCaption => vec![
                "<video> Describe the video concisely.",
                "<video> What's happening in this video?",
                "<video> Write a terse but informative summary of the VCR.",
            ],
            TaskKind::Res | TaskKind::SemanticSeg => vec![
                "<image> Segment out the <class>.",
                "<image> Output the mask of the <class>.",
                "<image> Find the <class> in the picture.",
            ],
            TaskKind::Rec => vec![
                "<image> Output the bounding box of the <class>.",
                "<image> Locate the <class> in the image.",
                "<image> Where is the <class>?",
            ],
            TaskKind::Captioning => vec![
                "<image> Describe the image concisely.",
                "<image> Write a short caption for the picture.",
                "<image> What does this image show?",
            ],
            TaskKind::Vqa => return None,
        };
        Some(TemplatePool {
            task_kind: task,
            templates: templates.into_iter().map(String::from).collect(),
        })
    }
}
