#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"
#include "psat/config.hpp"

// JSON <-> struct converters shared by config parsing and the checkpoint
// header. Parsers are strict: unknown keys fail with their full path.
namespace psat::cfgjson {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& what);
void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed);
const json* find(const json& obj, const char* key);
const json& need(const json& obj, const std::string& path, const char* key);

double num_at(const json& v, const std::string& path);
size_t uint_at(const json& v, const std::string& path);
uint64_t u64_at(const json& v, const std::string& path);
int int_at(const json& v, const std::string& path);
bool bool_at(const json& v, const std::string& path);
std::string str_at(const json& v, const std::string& path);

json plan_to_json(const PlanDesc& p);
PlanDesc plan_from_json(const json& v, const std::string& path);

json hypernet_to_json(const HypernetConfig& h);
HypernetConfig hypernet_from_json(const json& v, const std::string& path);

json attacks_to_json(const PerturbationSet& s);
PerturbationSet attacks_from_json(const json& v, const std::string& path);

json train_to_json(const TrainConfig& t);
TrainConfig train_from_json(const json& v, const std::string& path);

json dataset_to_json(const DatasetSpec& d);
DatasetSpec dataset_from_json(const json& v, const std::string& path);

json run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const json& v, const std::string& origin);

}  // namespace psat::cfgjson
