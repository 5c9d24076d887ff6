//! The remotely sensed proxies and survey welfare measures selectable
//! throughout the pipeline.

/// A remotely sensed quantity: used both as a per-cell outcome and as the
/// per-household Q in Engel curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proxy {
    Footprint,
    TinArea,
    NightLight,
}

impl Proxy {
    pub const ALL: [Proxy; 3] = [Proxy::Footprint, Proxy::TinArea, Proxy::NightLight];

    pub fn as_str(&self) -> &'static str {
        match self {
            Proxy::Footprint => "footprint",
            Proxy::TinArea => "tin_area",
            Proxy::NightLight => "night",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "footprint" => Some(Proxy::Footprint),
            "tin_area" => Some(Proxy::TinArea),
            "night" => Some(Proxy::NightLight),
            _ => None,
        }
    }
}

/// A survey-based measure of economic well-being.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Welfare {
    TotalAssets,
    HousingAssets,
    NonHousingAssets,
    Expenditure,
}

impl Welfare {
    pub const ALL: [Welfare; 4] = [
        Welfare::TotalAssets,
        Welfare::HousingAssets,
        Welfare::NonHousingAssets,
        Welfare::Expenditure,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Welfare::TotalAssets => "total_assets",
            Welfare::HousingAssets => "housing_assets",
            Welfare::NonHousingAssets => "non_housing_assets",
            Welfare::Expenditure => "expenditure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "total_assets" => Some(Welfare::TotalAssets),
            "housing_assets" => Some(Welfare::HousingAssets),
            "non_housing_assets" => Some(Welfare::NonHousingAssets),
            "expenditure" => Some(Welfare::Expenditure),
            _ => None,
        }
    }
}
