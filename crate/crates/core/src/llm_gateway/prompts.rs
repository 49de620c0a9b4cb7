use super::{GatewayError, PromptStep};

const JSON_RULE: &str = "Reply with exactly one fenced ```json block and nothing else.";

fn bullet_list(labels: &[String]) -> String {
    labels.iter().map(|l| format!("- {l}\n")).collect()
}

/// Instantiates the template for `step`. Concurrency and loop prompts list the
/// known activities so answers can be checked against them.
pub fn render_prompt(step: PromptStep, description: &str, activities: &[String]) -> Result<String, GatewayError> {
    let description = description.trim();
    if description.is_empty() {
        return Err(GatewayError::EmptyDescription);
    }
    if activities.is_empty() && matches!(step, PromptStep::Concurrency | PromptStep::Loops) {
        return Err(GatewayError::MissingActivities(step));
    }
    let body = match step {
        PromptStep::Paths => format!(
            "Read the process description below and write down every way the process can run from its \
first activity to its last one. Give each run as an ordered list of short activity names, reusing \
exactly the same name whenever the same activity shows up in another run.\n\
If the process repeats some activities, do not go around the repetition: every activity appears at \
most once per run.\n\n\
Process description:\n{description}\n\n\
{JSON_RULE} Its shape is {{\"paths\": [[\"activity\", \"activity\", ...], ...]}}."
        ),
        PromptStep::Concurrency => format!(
            "Below are a process description and the activities it contains. Find the pairs of activities \
that are independent of each other: in one run of the process they may happen in either order or at \
the same time. Use the activity names exactly as listed.\n\n\
Process description:\n{description}\n\n\
Activities:\n{}\n\
{JSON_RULE} Its shape is {{\"pairs\": [[\"activity\", \"activity\"], ...]}}; use an empty list when no \
pair qualifies.",
            bullet_list(activities)
        ),
        PromptStep::Loops => format!(
            "Below are a process description and the activities it contains. Find the groups of activities \
that the process may carry out again, as one block, after having done them once. Use the activity names \
exactly as listed.\n\n\
Process description:\n{description}\n\n\
Activities:\n{}\n\
{JSON_RULE} Its shape is {{\"loops\": [[\"activity\", ...], ...]}}; use an empty list when nothing \
repeats.",
            bullet_list(activities)
        ),
        PromptStep::Abstraction => format!(
            "The runs of the process described below repeat some stretches of activities. Each stretch \
is listed on its own line. Group the stretches that stand for the same higher-level task and give each \
group a short name.\n\n\
Process description:\n{description}\n\n\
Repeated stretches:\n{}\n\
{JSON_RULE} Its shape is {{\"entries\": [{{\"label\": \"name\", \"variants\": [[\"activity\", ...], ...]}}, ...]}}.",
            bullet_list(activities)
        ),
    };
    Ok(body)
}

const OPENINGS: [(PromptStep, &str); 4] = [
    (PromptStep::Paths, "Read the process description below and write down every way"),
    (PromptStep::Concurrency, "Below are a process description and the activities it contains. Find the pairs"),
    (PromptStep::Loops, "Below are a process description and the activities it contains. Find the groups"),
    (PromptStep::Abstraction, "The runs of the process described below repeat"),
];

/// Step whose template produced `prompt` (repair prompts included).
pub fn prompt_step_of(prompt: &str) -> Option<PromptStep> {
    OPENINGS.iter().find(|(_, o)| prompt.starts_with(o)).map(|(s, _)| *s)
}

/// Appends a correction request to a prompt whose answer was rejected.
pub fn repair_prompt(prompt: &str, problem: &str) -> String {
    format!("{prompt}\n\nYour previous answer could not be used: {problem}\nAnswer again. {JSON_RULE}")
}
