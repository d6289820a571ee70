//! Phrase bank for the synthetic history-taking corpus.
//!
//! A class is a (question frame, clinical topic) pair. Frames carry
//! paraphrase patterns with a `{T}` slot; topics carry interchangeable
//! surface phrases. Overlapping words across frames and topics ("pain",
//! "your", "worse") keep neighbouring classes confusable.

pub(crate) struct Frame {
    pub name: &'static str,
    pub patterns: &'static [&'static str],
}

pub(crate) struct Topic {
    pub name: &'static str,
    pub phrases: &'static [&'static str],
}

pub(crate) const FRAMES: &[Frame] = &[
    Frame {
        name: "onset",
        patterns: &[
            "when did {T} start",
            "how long have you had {T}",
            "when did you first notice {T}",
            "since when have you had {T}",
        ],
    },
    Frame {
        name: "location",
        patterns: &[
            "where do you feel {T}",
            "where exactly is {T}",
            "can you show me where {T} is",
            "which part of your body has {T}",
        ],
    },
    Frame {
        name: "severity",
        patterns: &[
            "how bad is {T}",
            "how severe is {T}",
            "rate {T} from one to ten",
            "how strong is {T}",
        ],
    },
    Frame {
        name: "frequency",
        patterns: &[
            "how often do you get {T}",
            "how frequently do you have {T}",
            "does {T} come and go",
            "how many times a week do you have {T}",
        ],
    },
    Frame {
        name: "trigger",
        patterns: &[
            "what makes {T} worse",
            "does anything trigger {T}",
            "what brings on {T}",
            "is {T} worse when you move",
        ],
    },
    Frame {
        name: "relief",
        patterns: &[
            "what makes {T} better",
            "does anything help {T}",
            "what relieves {T}",
            "have you found anything that eases {T}",
        ],
    },
    Frame {
        name: "presence",
        patterns: &[
            "do you have {T}",
            "are you having {T}",
            "have you noticed any {T}",
            "is there any {T}",
        ],
    },
    Frame {
        name: "history",
        patterns: &[
            "have you ever had {T} before",
            "did you have {T} in the past",
            "is this the first time you have had {T}",
            "any history of {T}",
        ],
    },
    Frame {
        name: "treatment",
        patterns: &[
            "have you taken anything for {T}",
            "what medicine do you use for {T}",
            "are you being treated for {T}",
            "did a doctor treat {T}",
        ],
    },
    Frame {
        name: "family",
        patterns: &[
            "does anyone in your family have {T}",
            "did your parents have {T}",
            "is there {T} in your family",
            "do your relatives suffer from {T}",
        ],
    },
    Frame {
        name: "impact",
        patterns: &[
            "how does {T} affect your work",
            "does {T} stop you from sleeping",
            "can you still work with {T}",
            "does {T} keep you from daily activities",
        ],
    },
    Frame {
        name: "change",
        patterns: &[
            "is {T} getting worse",
            "has {T} changed over time",
            "is {T} getting better or worse",
            "has {T} improved at all",
        ],
    },
    Frame {
        name: "timing",
        patterns: &[
            "is {T} worse in the morning",
            "do you get {T} at night",
            "what time of day is {T} worst",
            "is {T} constant or does it come at certain times",
        ],
    },
    Frame {
        name: "describe",
        patterns: &[
            "can you describe {T}",
            "what does {T} feel like",
            "tell me more about {T}",
            "how would you describe {T}",
        ],
    },
    Frame {
        name: "cause",
        patterns: &[
            "what do you think caused {T}",
            "did something happen before {T}",
            "was there an injury before {T}",
            "do you know why you have {T}",
        ],
    },
    Frame {
        name: "worry",
        patterns: &[
            "are you worried about {T}",
            "does {T} concern you",
            "what worries you most about {T}",
            "are you scared of {T}",
        ],
    },
];

pub(crate) const TOPICS: &[Topic] = &[
    Topic { name: "pain", phrases: &["the pain", "your pain", "this pain"] },
    Topic { name: "back_pain", phrases: &["the back pain", "your back pain", "pain in your lower back"] },
    Topic { name: "headache", phrases: &["headaches", "a headache", "head pain"] },
    Topic { name: "numbness", phrases: &["numbness", "tingling in your legs", "loss of feeling"] },
    Topic { name: "fever", phrases: &["a fever", "fevers", "a high temperature"] },
    Topic { name: "nausea", phrases: &["nausea", "feeling sick to your stomach", "the urge to vomit"] },
    Topic { name: "sleep", phrases: &["trouble sleeping", "sleep problems", "insomnia"] },
    Topic { name: "weight_loss", phrases: &["weight loss", "losing weight", "a drop in your weight"] },
    Topic { name: "cough", phrases: &["a cough", "coughing", "a chest cough"] },
    Topic { name: "fatigue", phrases: &["fatigue", "tiredness", "low energy"] },
    Topic { name: "stiffness", phrases: &["stiffness", "a stiff back", "stiff joints"] },
    Topic { name: "spasms", phrases: &["muscle spasms", "cramps", "muscle cramps"] },
    Topic { name: "bladder", phrases: &["bladder problems", "trouble urinating", "loss of bladder control"] },
    Topic { name: "dizziness", phrases: &["dizziness", "feeling dizzy", "light headedness"] },
    Topic { name: "chest_pain", phrases: &["chest pain", "pain in your chest", "tightness in your chest"] },
    Topic { name: "depression", phrases: &["depression", "feeling down", "a low mood"] },
    Topic { name: "anxiety", phrases: &["anxiety", "feeling nervous", "stress"] },
    Topic { name: "blood_pressure", phrases: &["high blood pressure", "blood pressure problems", "hypertension"] },
    Topic { name: "diabetes", phrases: &["diabetes", "high blood sugar", "sugar problems"] },
    Topic { name: "arthritis", phrases: &["arthritis", "joint pain", "swollen joints"] },
    Topic { name: "leg_weakness", phrases: &["weakness in your legs", "weak legs", "leg weakness"] },
    Topic { name: "breathing", phrases: &["shortness of breath", "trouble breathing", "breathing problems"] },
    Topic { name: "rash", phrases: &["a rash", "skin problems", "itchy skin"] },
    Topic { name: "swelling", phrases: &["swelling", "swollen ankles", "fluid in your legs"] },
];

pub(crate) const PREFIXES: &[&str] = &[
    "",
    "",
    "",
    "so",
    "okay",
    "and",
    "can you tell me",
    "i want to know",
    "please tell me",
];

pub(crate) const SUFFIXES: &[&str] = &["", "", "", "today", "now", "at all", "lately", "right now"];

pub(crate) fn max_classes() -> usize {
    FRAMES.len() * TOPICS.len()
}

/// Fixed class → (frame, topic) assignment. Consecutive classes walk
/// through the frames while topics advance by a stride, so any prefix of the
/// class list mixes frames and topics.
pub(crate) fn class_parts(class: usize) -> (usize, usize) {
    let f = FRAMES.len();
    let frame = class % f;
    let topic = (class / f + 5 * frame) % TOPICS.len();
    (frame, topic)
}
