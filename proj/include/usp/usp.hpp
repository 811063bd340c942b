#pragma once

#include "usp/common.hpp"
#include "usp/wire.hpp"
#include "usp/auth.hpp"
#include "usp/token.hpp"
#include "usp/session.hpp"
#include "usp/connection.hpp"
#include "usp/transport.hpp"
#include "usp/tcp.hpp"
#include "usp/agent.hpp"
#include "usp/harness.hpp"
