#pragma once

#include "dvit/augment.hpp"
#include "dvit/config.hpp"
#include "dvit/contrastive.hpp"
#include "dvit/data.hpp"
#include "dvit/finetune.hpp"
#include "dvit/optim.hpp"
#include "dvit/vit.hpp"

namespace dvit {

// Config-file bindings. Section/key names are part of the CLI contract.

ViTConfig vit_from_config(const Config& cfg);                    // [vit]
ContrastiveConfig contrastive_from_config(const Config& cfg);    // [contrastive]
AugPolicy augment_from_config(const Config& cfg, int default_output_size);  // [augment]
TrainConfig train_from_config(const Config& cfg);                // [train]
FinetuneSchedule finetune_from_config(const Config& cfg, bool layer_decay_default);  // [finetune]
SegHeadConfig seg_from_config(const Config& cfg);                // [seg]
DepthHeadConfig depth_from_config(const Config& cfg);            // [depth]
SyntheticShapesSpec shapes_from_config(const Config& cfg);       // [data]

}  // namespace dvit
