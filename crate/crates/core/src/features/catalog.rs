//! The fixed feature catalog: every feature, its category, and the readable
//! descriptions used by explanation cards.

use serde::{Deserialize, Serialize};

/// Version of the built-in catalog. Bump when features are added, removed or
/// reordered; model checkpoints record it.
pub const CATALOG_VERSION: u32 = 1;

/// The five feature categories. Declaration order is the fixed tie-break
/// order used when ranking categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    PhoneAppUse,
    Activity,
    Social,
    Location,
    Time,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::PhoneAppUse,
        Category::Activity,
        Category::Social,
        Category::Location,
        Category::Time,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// High-level explanation label (the card icon key).
    pub fn high_level_label(self) -> &'static str {
        match self {
            Category::PhoneAppUse => "Phone & App Use",
            Category::Activity => "Activity",
            Category::Social => "Social",
            Category::Location => "Location",
            Category::Time => "Time",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub feature_id: String,
    pub category: Category,
    pub readable_name: String,
    pub low_level_description: String,
    pub high_level_label: String,
}

macro_rules! feature_table {
    ($($variant:ident => $id:literal, $cat:ident, $readable:literal, $low:literal;)*) => {
        /// Index of each feature in the built-in catalog.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        #[repr(usize)]
        pub enum Feature {
            $($variant),*
        }

        impl Feature {
            /// Every feature in catalog order.
            pub const ALL: &[Feature] = &[$(Feature::$variant),*];
        }

        const TABLE: &[(&str, Category, &str, &str)] = &[
            $(($id, Category::$cat, $readable, $low)),*
        ];
    };
}

feature_table! {
    // Phone & app use: local midnight up to the decision instant.
    CountUnlock => "countUnlock", PhoneAppUse, "Number of Phone Unlocks", "Phone Unlocks";
    SumDurationUnlock => "sumDurationUnlock", PhoneAppUse, "Total Unlocked Duration", "Phone Unlocks";
    BatteryConsumptionRate => "batteryConsumptionRate", PhoneAppUse, "Battery Consumption Rate", "Battery Usage";
    SumDurationCharge => "sumDurationCharge", PhoneAppUse, "Battery Charge Duration", "Battery Usage";
    SumDurationDischarge => "sumDurationDischarge", PhoneAppUse, "Battery Discharge Duration", "Battery Usage";
    CountAppsVisited => "countAppsVisited", PhoneAppUse, "Number of Monitored Apps Visited", "App Visit Frequency";
    MinVisitsPerApp => "minVisitsPerApp", PhoneAppUse, "Minimum Visits per App", "App Visit Frequency";
    MaxVisitsPerApp => "maxVisitsPerApp", PhoneAppUse, "Maximum Visits per App", "App Visit Frequency";
    MeanVisitsPerApp => "meanVisitsPerApp", PhoneAppUse, "Average Visits per App", "App Visit Frequency";
    StdVisitsPerApp => "stdVisitsPerApp", PhoneAppUse, "Variation of Visits per App", "App Visit Frequency";
    SumVisits => "sumVisits", PhoneAppUse, "Total App Visits", "App Visit Frequency";
    MinSessionDuration => "minSessionDuration", PhoneAppUse, "Shortest App Session", "Time Spent in Apps";
    MaxSessionDuration => "maxSessionDuration", PhoneAppUse, "Longest App Session", "Time Spent in Apps";
    MeanSessionDuration => "meanSessionDuration", PhoneAppUse, "Average App Session", "Time Spent in Apps";
    StdSessionDuration => "stdSessionDuration", PhoneAppUse, "Variation of App Sessions", "Time Spent in Apps";
    SumSessionDuration => "sumSessionDuration", PhoneAppUse, "Total Time Spent in Apps", "Time Spent in Apps";
    CountScroll => "numViewScrolled", PhoneAppUse, "Number of Scrolls", "Number of Interactions";
    CountClick => "numViewClicked", PhoneAppUse, "Number of Clicks", "Number of Interactions";
    CountFocus => "numViewFocused", PhoneAppUse, "Number of Focus Changes", "Number of Interactions";
    CountWindowChange => "numWindowStateChanged", PhoneAppUse, "Number of Window Changes", "Number of Interactions";
    PropScroll => "propViewScrolled", PhoneAppUse, "Proportion of Scrolls", "Types of Interactions";
    PropClick => "propViewClicked", PhoneAppUse, "Proportion of Clicks", "Types of Interactions";
    PropFocus => "propViewFocused", PhoneAppUse, "Proportion of Focus Changes", "Types of Interactions";
    PropWindowChange => "propWindowStateChanged", PhoneAppUse, "Proportion of Window Changes", "Types of Interactions";
    ScrollsCurrentAppCategory => "numViewScrolledCurrentAppCategory", PhoneAppUse, "Number of Scrolls in Current App Category", "Number of Interactions";
    CountNotifications => "countNotifications", PhoneAppUse, "Number of Notifications", "Notifications";
    NotificationDiversity => "diversityNotifications", PhoneAppUse, "Number of Notifying Apps", "Notifications";
    // Activity: trailing context horizon.
    DurationStationary => "durationStationary", Activity, "Duration of Being Stationary", "Duration of Being Stationary";
    DurationMobile => "durationMobile", Activity, "Duration of Being Mobile", "Duration of Being Mobile";
    MinLux => "minLux", Activity, "Minimum Lux in Light Conditions", "Light Conditions";
    MaxLux => "maxLux", Activity, "Maximum Lux in Light Conditions", "Light Conditions";
    AvgLux => "avgLux", Activity, "Average Lux in Light Conditions", "Light Conditions";
    StdLux => "stdLux", Activity, "Variation of Lux in Light Conditions", "Light Conditions";
    // Social context: trailing context horizon.
    CountMessagesSent => "countMessagesSent", Social, "Number of Sent Messages", "Messaging Activity";
    CountMessagesReceived => "countMessagesReceived", Social, "Number of Received Messages", "Messaging Activity";
    TimeFirstSent => "timeFirstSent", Social, "Time of First Sent Message", "Time of Sent Message";
    CountTopContactMessages => "countMessagesTopContact", Social, "Messages with Top Contact", "Messaging Activity";
    MeanDevicesPerScan => "meanDevicesPerScan", Social, "Average Nearby Devices per Scan", "Number of Nearby Devices";
    StdDevicesPerScan => "stdDevicesPerScan", Social, "Variation of Nearby Devices per Scan", "Number of Nearby Devices";
    CountUniqueDevices => "countUniqueDevices", Social, "Number of Unique Nearby Devices", "Number of Nearby Devices";
    CountScansMostFrequentDevice => "countScansMostFrequentDevice", Social, "Number of Frequently Scanned Devices", "Number of Nearby Devices";
    // Location: trailing context horizon.
    LocationVariance => "locationVariance", Location, "Location Variance", "Movement Range";
    LocationEntropy => "locationEntropy", Location, "Location Entropy", "Movement Range";
    TimeAtTopOneLocation => "timeAtTopOneLocation", Location, "Time Spent at Top One Location", "Time at Frequent Locations";
    TimeAtTopTwoLocation => "timeAtTopTwoLocation", Location, "Time Spent at Top Two Location", "Time at Frequent Locations";
    TimeAtHome => "timeAtHome", Location, "Time Spent at Home", "Time at Home";
    MinLengthStayAtClusters => "minLengthStayAtClusters", Location, "Minimum Stay at Frequent Locations", "Time at Frequent Locations";
    MaxLengthStayAtClusters => "maxLengthStayAtClusters", Location, "Maximum Stay at Frequent Locations", "Time at Frequent Locations";
    MeanLengthStayAtClusters => "meanLengthStayAtClusters", Location, "Average Stay at Frequent Locations", "Time at Frequent Locations";
    TotalTravelDistance => "totalDistance", Location, "Total Travel Distance", "Travel Distance";
    MovingToStaticRatio => "movingToStaticRatio", Location, "Moving to Static Ratio", "Travel Distance";
    MeanVisibleAps => "meanVisibleAps", Location, "Average Visible WiFi Access Points", "Nearby WiFi Networks";
    StdVisibleAps => "stdVisibleAps", Location, "Variation of Visible WiFi Access Points", "Nearby WiFi Networks";
    CountConnectedScans => "countConnectedScans", Location, "Number of Connected WiFi Scans", "Nearby WiFi Networks";
    CountUniqueConnectedAps => "countUniqueConnectedAps", Location, "Number of Connected WiFi Access Points", "Nearby WiFi Networks";
    // Time.
    HourOfDay => "hourOfDay", Time, "Hour of the Day", "the Time of Day";
    IsNight => "isNight", Time, "Whether it is the Night Time", "the Night Time";
}

/// Number of features in the built-in catalog.
pub const FEATURE_COUNT: usize = TABLE.len();

impl Feature {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Ordered list of features. Feature vectors are aligned with this order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCatalog {
    pub version: u32,
    pub features: Vec<FeatureSpec>,
}

impl Default for FeatureCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

impl FeatureCatalog {
    pub fn builtin() -> Self {
        FeatureCatalog {
            version: CATALOG_VERSION,
            features: TABLE
                .iter()
                .map(|(id, cat, readable, low)| FeatureSpec {
                    feature_id: (*id).to_string(),
                    category: *cat,
                    readable_name: (*readable).to_string(),
                    low_level_description: (*low).to_string(),
                    high_level_label: cat.high_level_label().to_string(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn category_of(&self, index: usize) -> Category {
        self.features[index].category
    }

    pub fn index_of(&self, feature_id: &str) -> Option<usize> {
        self.features.iter().position(|f| f.feature_id == feature_id)
    }

    pub fn get(&self, feature_id: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.feature_id == feature_id)
    }

    /// Feature indices belonging to `category`, in catalog order.
    pub fn indices_of(&self, category: Category) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.features[i].category == category)
            .collect()
    }

    /// Per-feature category indices, aligned with catalog order.
    pub fn category_indices(&self) -> Vec<u8> {
        self.features
            .iter()
            .map(|f| f.category.index() as u8)
            .collect()
    }

    /// Checks uniqueness, category coverage and label consistency.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for f in &self.features {
            if !seen.insert(f.feature_id.as_str()) {
                return Err(format!("duplicate feature id `{}`", f.feature_id));
            }
            if f.high_level_label != f.category.high_level_label() {
                return Err(format!(
                    "feature `{}` has high-level label `{}` but category {:?}",
                    f.feature_id, f.high_level_label, f.category
                ));
            }
            if f.low_level_description.is_empty() {
                return Err(format!("feature `{}` has no description", f.feature_id));
            }
        }
        for cat in Category::ALL {
            if !self.features.iter().any(|f| f.category == cat) {
                return Err(format!("category {cat:?} has no features"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_catalog_is_valid() {
        let cat = FeatureCatalog::builtin();
        cat.validate().unwrap();
        assert_eq!(cat.len(), FEATURE_COUNT);
    }

    #[test]
    fn enum_indices_match_ids() {
        let cat = FeatureCatalog::builtin();
        assert_eq!(cat.index_of("countUnlock"), Some(Feature::CountUnlock.index()));
        assert_eq!(cat.index_of("isNight"), Some(Feature::IsNight.index()));
        assert_eq!(
            cat.index_of("timeAtTopOneLocation"),
            Some(Feature::TimeAtTopOneLocation.index())
        );
        assert_eq!(Feature::IsNight.index(), FEATURE_COUNT - 1);
    }

    #[test]
    fn appendix_style_descriptions() {
        let cat = FeatureCatalog::builtin();
        let top = cat.get("timeAtTopOneLocation").unwrap();
        assert_eq!(top.low_level_description, "Time at Frequent Locations");
        assert_eq!(top.high_level_label, "Location");
        let min_stay = cat.get("minLengthStayAtClusters").unwrap();
        assert_eq!(min_stay.low_level_description, "Time at Frequent Locations");
        let scroll = cat.get("numViewScrolledCurrentAppCategory").unwrap();
        assert_eq!(scroll.high_level_label, "Phone & App Use");
        assert_eq!(scroll.low_level_description, "Number of Interactions");
        assert_eq!(
            cat.get("sumDurationDischarge").unwrap().low_level_description,
            "Battery Usage"
        );
        assert_eq!(cat.get("avgLux").unwrap().low_level_description, "Light Conditions");
        assert_eq!(
            cat.get("countScansMostFrequentDevice")
                .unwrap()
                .low_level_description,
            "Number of Nearby Devices"
        );
        assert_eq!(
            cat.get("timeFirstSent").unwrap().low_level_description,
            "Time of Sent Message"
        );
        assert_eq!(cat.get("isNight").unwrap().low_level_description, "the Night Time");
        assert_eq!(
            cat.get("durationMobile").unwrap().low_level_description,
            "Duration of Being Mobile"
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut cat = FeatureCatalog::builtin();
        let first = cat.features[0].clone();
        cat.features.push(first);
        assert!(cat.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let cat = FeatureCatalog::builtin();
        assert_eq!(FeatureCatalog::from_json(&cat.to_json()).unwrap(), cat);
    }
}
