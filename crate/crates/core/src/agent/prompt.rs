use std::fmt::Write;

use super::{AgentRole, Checklist, ChecklistAnswers};
use crate::error::{Error, Result};

/// The Detective's closing question, verbatim.
pub const DETECTIVE_QUESTION: &str = "Is it a match? Yes or No!";

/// Everything a prompt template may draw on. Which fields are required
/// depends on the role.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptInputs<'a> {
    pub query_text: &'a str,
    pub checklist: Option<&'a Checklist>,
    pub evidence: Option<&'a ChecklistAnswers>,
    pub prior_caption: Option<&'a str>,
    /// Writer only: show the original query next to the evidence.
    pub include_query: bool,
}

pub fn render_prompt(role: AgentRole, inputs: &PromptInputs<'_>) -> Result<String> {
    let mut p = String::new();
    match role {
        AgentRole::Detective => {
            p.push_str(
                "You are the Detective. You screen surveillance images against a witness \
                 description and throw out suspects that do not fit.\n",
            );
            let _ = writeln!(p, "Description: {}", inputs.query_text.trim());
            p.push_str("Look at the person and the behavior in the image. ");
            p.push_str(DETECTIVE_QUESTION);
        }
        AgentRole::Analyst => {
            let checklist = inputs.checklist.ok_or(Error::MissingInput {
                role,
                what: "checklist",
            })?;
            p.push_str(
                "You are the Analyst. Perform a physical examination of the person in the image \
                 and report only what is visible.\n",
            );
            if let Some(prior) = inputs.prior_caption {
                let _ = writeln!(p, "Previous description of this image: {}", prior.trim());
                p.push_str("Confirm or correct it item by item.\n");
            }
            p.push_str("Answer every item on one line as `key: value`.\n");
            for (i, key) in checklist.keys().iter().enumerate() {
                let _ = writeln!(p, "{}. {key}", i + 1);
            }
            p.truncate(p.trim_end().len());
        }
        AgentRole::Writer => {
            let evidence = inputs.evidence.ok_or(Error::MissingInput { role, what: "evidence" })?;
            p.push_str(
                "You are the Writer. Combine the verified evidence below into a single, \
                 continuous caption describing the person and what they are doing. \
                 Use only the evidence. Reply with the caption alone.\n",
            );
            if inputs.include_query {
                let _ = writeln!(p, "Original description: {}", inputs.query_text.trim());
            }
            p.push_str("Evidence:\n");
            match inputs.checklist {
                Some(c) => p.push_str(&evidence.to_lines(c)),
                None => {
                    let lines: Vec<String> = evidence.0.iter().map(|(k, v)| format!("{k}: {v}")).collect();
                    p.push_str(&lines.join("\n"));
                }
            }
            p.truncate(p.trim_end().len());
        }
    }
    Ok(p)
}
