"""
Testes de integracao para routers.
"""
