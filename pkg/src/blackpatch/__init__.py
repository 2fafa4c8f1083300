"""Black-box patch attacks on image classifiers.

RL-searched monochrome, colored, and textured patches, a
Metropolis-Hastings baseline over the same search spaces, a
Gram-matrix texture dictionary, and a query-budgeted harness.
"""

from .attacks import (
    MH_GRAY,
    MH_RGB,
    MH_TEXTURE,
    NON_TARGETED,
    RL_GRAY,
    RL_RGB,
    RL_TEXTURE,
    TARGETED,
    VARIANTS,
    AttackOutcome,
    AttackSpec,
    AttackTask,
    MHConfig,
    RLConfig,
    compute_reward,
    is_success,
    run_attack,
)
from .data import ImageFolder, SyntheticObjects
from .errors import (
    BudgetExceeded,
    DatasetUnavailable,
    InsufficientSamples,
    MissingTexture,
    ShapeMismatch,
    UnknownAdapter,
    WeightsUnavailable,
)
from .geometry import (
    Rect,
    Region,
    SearchSpaceSpec,
    TexturePlacement,
    apply_monochrome,
    apply_texture,
    mono_space,
    patch_side_for_area,
    region_area,
    rgb_space,
    texture_space,
)
from .harness import (
    ExperimentConfig,
    experiment_from_config,
    load_records,
    report,
    run_experiment,
    summarize,
    task_seed,
)
from .rl import (
    Episode,
    MetropolisHastings,
    PolicyAgent,
    mh_accept_probability,
    reinforce_loss,
    reinforce_update,
    sample_episode,
    should_stop_early,
)
from .textures import (
    StyleBackbone,
    SynthesisConfig,
    TextureDictionary,
    attention_map,
    build_dictionary,
    cluster_category,
    extract_gram,
    gram_matrix,
    masked_gram,
    synthesize_texture,
    vgg19_backbone,
)
from .victim import (
    MeteredVictim,
    QueryLedger,
    VictimHandle,
    build_victim,
    register_adapter,
)

__version__ = "0.1.0"
