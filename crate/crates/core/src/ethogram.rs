//! The capuchin ethogram: action names and short operational descriptions.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::read_file;
use crate::error::{Error, Result};

const TABLE: [(&str, &str); 34] = [
    ("Forage", "Searches for food."),
    ("Predation", "Attempts to capture prey."),
    ("Eat", "Chews and swallows food."),
    ("Sample", "Sniffs or bites food without eating."),
    ("Stand Still", "Remains motionless while awake."),
    ("Rest/Sleep", "Rests sitting or lying down."),
    ("Move, Walk or Run", "Moves using all four limbs."),
    ("Bipedal Action", "Moves or stands on two feet."),
    ("Locomotion While Foraging", "Carries food while moving."),
    ("Grooming", "Cleans another monkey’s fur."),
    ("Touch", "Places hand on another monkey."),
    ("Nurse", "Feeds from female’s breast."),
    ("Rest in Group", "Rests in contact with others."),
    ("Play", "Engages in non-aggressive play."),
    ("Lipsmack", "Rapidly presses and opens lips."),
    ("Sexual", "Mounting, body touching, genital contact, or copulation."),
    ("Scrounge", "Collects and eats dropped food."),
    ("Beg Food", "Requests food using gestures."),
    ("Alocarrying", "Carries another monkey on its back."),
    ("Hug", "Embraces another monkey."),
    ("Threatening", "Displays aggressive facial expressions."),
    ("Double Threatening", "Two monkeys threaten simultaneously."),
    ("Chase", "Pursues another monkey."),
    ("Fight", "Engages in violent conflict."),
    ("Vigilant", "Scans surroundings with raised head."),
    ("Runaway", "Moves away from a threat."),
    ("Sexual Self-Inspection", "Manipulates own genitals."),
    ("Anointing", "Rubs chewed substances on fur."),
    ("Urine Washing", "Rubs urine on its own body."),
    ("Autoplay", "Plays alone."),
    ("Auto-Grooming", "Grooms itself."),
    ("Scratch", "Rubs to relieve itching."),
    ("Yawn", "Opens mouth wide and breathes deeply."),
    ("Nose Wipe", "Touches own nose."),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ethogram {
    actions: Vec<Action>,
}

impl Default for Ethogram {
    fn default() -> Self {
        Self::capuchin()
    }
}

impl Ethogram {
    /// The 34-action ethogram used throughout.
    pub fn capuchin() -> Self {
        Self {
            actions: TABLE
                .iter()
                .map(|(n, d)| Action {
                    name: (*n).to_string(),
                    description: (*d).to_string(),
                })
                .collect(),
        }
    }

    pub fn new(actions: Vec<Action>) -> Result<Self> {
        let mut seen = HashSet::new();
        for a in &actions {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Config(format!("duplicate ethogram action {:?}", a.name)));
            }
        }
        Ok(Self { actions })
    }

    /// Reads a JSON array of `{name, description}` objects.
    pub fn load(path: &Path) -> Result<Self> {
        let actions: Vec<Action> = serde_json::from_slice(&read_file(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::new(actions)
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().map(|a| a.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    /// One `- Name: description` line per action, for prompt templates.
    pub fn render(&self) -> String {
        self.actions
            .iter()
            .map(|a| format!("- {}: {}", a.name, a.description))
            .collect::<Vec<_>>()
            .join("\n")
    }
}
