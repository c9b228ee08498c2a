#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "fedtab/fed.hpp"
#include "fedtab/model.hpp"

// JSON encodings shared by the coordinator, clients, and report files.
// Weights travel as decimal strings with 17 significant digits, which
// round-trips every finite IEEE-754 double exactly.
namespace fedtab {

std::string format_double17(double v);
double parse_double_exact(const std::string& text);  // throws ProtocolError

void to_json(nlohmann::json& j, const ParameterVector& w);
void from_json(const nlohmann::json& j, ParameterVector& w);

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

void to_json(nlohmann::json& j, const ModelUpdate& u);
void from_json(const nlohmann::json& j, ModelUpdate& u);

void to_json(nlohmann::json& j, const ConvergenceCriterion& c);
void from_json(const nlohmann::json& j, ConvergenceCriterion& c);

void to_json(nlohmann::json& j, const FedConfig& c);
void from_json(const nlohmann::json& j, FedConfig& c);

}  // namespace fedtab
