# Atlas Lab API Routers
