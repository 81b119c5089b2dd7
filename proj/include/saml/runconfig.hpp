#pragma once

#include <string>

#include <json.hpp>

#include "saml/corpus.hpp"
#include "saml/model.hpp"
#include "saml/pipeline.hpp"

namespace saml {

/// Everything a run needs, serializable as JSON. The CLI loads this from
/// --config (or defaults) and then applies flag overrides on top.
struct RunConfig {
    ModelConfig model;
    CorpusConfig corpus;
    TrainConfig pretrain;
    TrainConfig adapt;
    PruneThresholds thresholds;
    std::string out_dir = "runs";

    RunConfig();

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json & j);
    static RunConfig load(const std::string & path);
    void save(const std::string & path) const;

    void validate() const;
};

} // namespace saml
