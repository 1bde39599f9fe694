//! Task identities: a task is one COP family at one problem scale.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Objective direction of a COP family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopKind {
    Tsp,
    Cvrp,
    Op,
    Kp,
}

impl CopKind {
    pub const ALL: [CopKind; 4] = [CopKind::Tsp, CopKind::Cvrp, CopKind::Op, CopKind::Kp];

    pub fn name(self) -> &'static str {
        match self {
            CopKind::Tsp => "tsp",
            CopKind::Cvrp => "cvrp",
            CopKind::Op => "op",
            CopKind::Kp => "kp",
        }
    }

    pub fn parse(s: &str) -> Result<CopKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tsp" => Ok(CopKind::Tsp),
            "cvrp" => Ok(CopKind::Cvrp),
            "op" => Ok(CopKind::Op),
            "kp" => Ok(CopKind::Kp),
            other => Err(Error::Config(format!("unknown COP family '{other}'"))),
        }
    }

    pub fn sense(self) -> Sense {
        match self {
            CopKind::Tsp | CopKind::Cvrp => Sense::Min,
            CopKind::Op | CopKind::Kp => Sense::Max,
        }
    }

    /// Per-node input features consumed by the model header.
    pub fn input_dim(self) -> usize {
        match self {
            CopKind::Tsp => 2,          // x, y
            CopKind::Cvrp => 3,         // x, y, demand/capacity
            CopKind::Op => 3,           // x, y, prize
            CopKind::Kp => 2,           // weight, value
        }
    }

    /// Largest scale the exact solver for this family accepts.
    pub fn oracle_cap(self) -> usize {
        match self {
            CopKind::Tsp => 12,
            CopKind::Cvrp => 6,
            CopKind::Op => 10,
            CopKind::Kp => 200,
        }
    }
}

impl fmt::Display for CopKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense index of a task within a [`TaskRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub cop: CopKind,
    pub scale: usize,
}

impl Task {
    pub fn name(&self) -> String {
        format!("{}-{}", self.cop, self.scale)
    }

    /// Parses names of the form "tsp-5".
    pub fn parse(s: &str) -> Result<Task> {
        let (cop, scale) = s
            .trim()
            .rsplit_once('-')
            .ok_or_else(|| Error::Config(format!("task name '{s}' is not '<cop>-<scale>'")))?;
        let scale: usize = scale
            .parse()
            .map_err(|_| Error::Config(format!("task name '{s}' has a non-numeric scale")))?;
        Ok(Task { cop: CopKind::parse(cop)?, scale })
    }
}

/// Ordered task set. Tasks are grouped by COP family; ids are dense indices
/// into that ordering. Scales must sit within each family's oracle cap so
/// every task stays evaluable against an exact solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    tasks: Vec<Task>,
    cops: Vec<CopKind>,
}

impl TaskRegistry {
    pub fn new(groups: &[(CopKind, Vec<usize>)]) -> Result<TaskRegistry> {
        let mut cops = Vec::new();
        let mut tasks = Vec::new();
        for (cop, scales) in groups {
            if cops.contains(cop) {
                return Err(Error::Config(format!("COP family '{cop}' listed twice")));
            }
            if scales.is_empty() {
                return Err(Error::Config(format!("COP family '{cop}' has no scales")));
            }
            cops.push(*cop);
            for &scale in scales {
                if scale < 2 {
                    return Err(Error::Config(format!("{cop} scale {scale} is below 2")));
                }
                if scale > cop.oracle_cap() {
                    return Err(Error::Config(format!(
                        "{cop} scale {scale} exceeds the exact-solver cap {}",
                        cop.oracle_cap()
                    )));
                }
                let task = Task { cop: *cop, scale };
                if tasks.contains(&task) {
                    return Err(Error::Config(format!("task {} listed twice", task.name())));
                }
                tasks.push(task);
            }
        }
        if tasks.is_empty() {
            return Err(Error::Config("registry has no tasks".into()));
        }
        Ok(TaskRegistry { tasks, cops })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TaskId> {
        (0..self.tasks.len()).map(TaskId)
    }

    pub fn task(&self, id: TaskId) -> Task {
        self.tasks[id.0]
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn cops(&self) -> &[CopKind] {
        &self.cops
    }

    /// Index of the task's family in [`cops`](Self::cops); also the index of
    /// its parameter segment.
    pub fn cop_index(&self, id: TaskId) -> usize {
        let cop = self.tasks[id.0].cop;
        self.cops.iter().position(|c| *c == cop).unwrap()
    }

    pub fn cop_indices(&self) -> Vec<usize> {
        self.ids().map(|id| self.cop_index(id)).collect()
    }

    pub fn find(&self, cop: CopKind, scale: usize) -> Option<TaskId> {
        self.tasks
            .iter()
            .position(|t| t.cop == cop && t.scale == scale)
            .map(TaskId)
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name()).collect()
    }

    /// Scales of one family in registry order.
    pub fn scales_of(&self, cop: CopKind) -> Vec<usize> {
        self.tasks
            .iter()
            .filter(|t| t.cop == cop)
            .map(|t| t.scale)
            .collect()
    }
}
