use serde::{Deserialize, Serialize};

use super::{LabState, ReferenceInterval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Normal,
    Abnormal,
}

impl Flag {
    pub fn is_abnormal(self) -> bool {
        self == Flag::Abnormal
    }

    fn from_abnormal(a: bool) -> Self {
        if a {
            Flag::Abnormal
        } else {
            Flag::Normal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThreeWayFlags {
    pub pop: Flag,
    pub per: Option<Flag>,
    pub norma: Option<Flag>,
}

/// Per-framework flags for one value. A population-abnormal value is
/// abnormal under every framework; a missing interval leaves that flag absent.
pub fn classify_three_way(
    value: f64,
    pop: LabState,
    per: Option<&ReferenceInterval>,
    norma: Option<&ReferenceInterval>,
) -> ThreeWayFlags {
    let pop_abnormal = pop != LabState::Normal;
    let flag = |ri: &ReferenceInterval| Flag::from_abnormal(pop_abnormal || !ri.contains(value));
    ThreeWayFlags {
        pop: Flag::from_abnormal(pop_abnormal),
        per: per.map(flag),
        norma: norma.map(flag),
    }
}
